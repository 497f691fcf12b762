"""Corpus pipeline tests: stage rules, n-gram scoring, dedup, and the
end-to-end planted-violation fixture."""

import json
import math

import pytest

from desklm.corpus import (Document, NgramModel, PipelineConfig, Shard, concat_sentences,
                           dedup_consecutive, dedup_cross, hash64, keyword_density_filter,
                           load_shard, normalize, perplexity, pipeline_run, rule_clean,
                           save_shard, split_sentences, tf_cosine, tokenize, train_ngram)
from desklm.errors import ConfigError

REF = (
    "the northern garden holds rows of hardy winter greens.",
    "careful watering keeps the garden soil loose and dark.",
    "rows of greens survive the long winter under cloth.",
    "the soil swallows water and the greens grow tall.",
    "the garden is in the north and the soil is in the dark.",
)
STOPWORDS = frozenset({"the", "and", "of", "is", "in"})


def base_cfg(**kw):
    base = dict(min_sentence_len=8, stopwords=STOPWORDS, ppl_reference=REF,
                concat_sim_threshold=0.5, density_threshold=0.2)
    base.update(kw)
    return PipelineConfig(**base)


# --- sentence splitting and rule cleaning ---------------------------------------


def test_split_sentences_on_terminal_punct_plus_whitespace():
    assert split_sentences("One two. Three four!", ".!?") == ["One two.", "Three four!"]
    assert split_sentences("no terminal punct", ".!?") == ["no terminal punct"]
    assert split_sentences("a.b.c. done.", ".!?") == ["a.b.c.", "done."]


def test_rule_clean_redacts_url_and_keeps_sentence():
    doc = rule_clean(Document(id="d", text="Visit https://x.example now."), base_cfg())
    assert not doc.rejected
    assert doc.text == "Visit now."
    assert ("rule_clean", "redact", "url") in doc.stage_log


def test_rule_clean_drops_sentence_without_terminal_punct():
    doc = rule_clean(Document(id="d", text="Hello world"), base_cfg())
    assert doc.rejected and doc.reject_reason() == "empty"
    assert ("rule_clean", "drop_sentence", "no_terminal_punct") in doc.stage_log


def test_rule_clean_strips_markup_and_redacts_pii():
    text = "<p>Write to alice@example.org today.</p> <script>var x = 1;</script>"
    doc = rule_clean(Document(id="d", text=text), base_cfg())
    assert doc.text == "Write to today."
    assert ("rule_clean", "redact", "pii") in doc.stage_log
    assert "script" not in doc.text


def test_rule_clean_blocklist_and_length():
    cfg = base_cfg(blocklist=frozenset({"forbidden"}))
    doc = rule_clean(Document(id="d", text="This mentions forbidden things. Tiny. All good here."), cfg)
    assert doc.text == "All good here."
    reasons = [r for _, a, r in doc.stage_log if a == "drop_sentence"]
    assert reasons == ["blocklist", "too_short"]


def test_rule_clean_rejects_undecodable_text():
    doc = rule_clean(Document(id="d", text="bad \ud800 char."), base_cfg())
    assert doc.rejected and doc.reject_reason() == "encoding"


def test_rule_clean_is_stable_on_own_output():
    cfg = base_cfg()
    doc = rule_clean(Document(id="d", text="Visit https://x.example now. Plain sentence here."), cfg)
    again = rule_clean(Document(id="d", text=doc.text), cfg)
    assert again.text == doc.text
    assert not any(a == "redact" for _, a, _ in again.stage_log)


# --- n-gram model and perplexity -----------------------------------------------


def test_bigram_ml_probability_before_and_after_smoothing():
    model = train_ngram(["a b a b"], order=2)
    # maximum-likelihood p(b | a) is exactly 1 before interpolation
    assert model.counts[1][("a",)]["b"] == model.totals[1][("a",)]
    assert model.prob("b", ("a",)) > 0.5


@pytest.mark.parametrize("context", [(), ("a",), ("zzz",), ("b", "a"), ("q", "zzz")])
def test_conditional_distributions_sum_to_one(context):
    model = train_ngram(["a b c a b", "b c a"], order=3)
    words = sorted(model.vocab) + ["<unk>"]
    total = sum(model.prob(w, context) for w in words)
    assert abs(total - 1.0) <= 1e-9


def test_uniform_unigram_perplexity_equals_vocab_size():
    model = train_ngram(["alpha beta gamma delta epsilon"], order=1, add_k=0.0)
    ppl = perplexity(model, "beta epsilon alpha")
    assert abs(ppl - 5.0) <= 1e-9


def test_in_domain_text_scores_below_scrambled():
    model = train_ngram(REF, order=3)
    good = "the garden soil holds winter greens."
    scrambled = "greens the holds soil winter garden."
    assert perplexity(model, good) < perplexity(model, scrambled)


def test_all_unknown_text_has_finite_perplexity():
    model = train_ngram(REF, order=3)
    assert math.isfinite(perplexity(model, "zzq wkx vbn plm."))


def test_ngram_input_validation():
    with pytest.raises(ValueError):
        train_ngram(["", "   "], order=2)
    model = train_ngram(["a b"], order=2)
    with pytest.raises(ValueError):
        perplexity(model, "...")


# --- keyword density -------------------------------------------------------------


def test_density_equality_keeps():
    cfg = base_cfg(density_threshold=0.5)
    doc = Document(id="d", text="the garden is of green grass here.")  # 4 of 8 non-stopword
    assert keyword_density_filter(doc, cfg)


def test_density_below_threshold_drops():
    doc = Document(id="d", text="the and of is in the and.")
    assert not keyword_density_filter(doc, base_cfg())
    assert ("keyword_density", "reject", "low_density") in doc.stage_log


def test_density_empty_token_list_drops_as_empty():
    doc = Document(id="d", text="?!.")
    assert not keyword_density_filter(doc, base_cfg())
    assert ("keyword_density", "reject", "empty") in doc.stage_log


# --- concatenation and dedup -------------------------------------------------------


def test_tf_cosine_bounds():
    assert abs(tf_cosine("a b c", "a b c") - 1.0) <= 1e-12
    assert tf_cosine("a b c", "x y z") == 0.0


def test_concat_merges_similar_adjacent_sentences():
    doc = Document(id="d", text="The greens grow tall.\n\nThe greens grow tall.")
    out = concat_sentences(doc, base_cfg())
    assert out.text == "The greens grow tall. The greens grow tall."
    assert ("concat_sentences", "merge", "similar") in out.stage_log


def test_concat_keeps_dissimilar_sentences_apart():
    doc = Document(id="d", text="Alpha beta gamma.\n\nDelta epsilon zeta.")
    out = concat_sentences(doc, base_cfg())
    assert "\n\n" in out.text


def test_concat_threshold_zero_merges_everything():
    doc = Document(id="d", text="One two three.\n\nFour five six.\n\nSeven eight nine.")
    out = concat_sentences(doc, base_cfg(concat_sim_threshold=0.0))
    assert "\n\n" not in out.text


def test_dedup_consecutive_collapses_runs_and_is_idempotent():
    doc = Document(id="d", text="Same line here. Same line here. Different now.")
    out = dedup_consecutive(doc)
    assert out.text == "Same line here. Different now."
    assert dedup_consecutive(Document(id="d2", text=out.text)).text == out.text


def test_dedup_consecutive_collapses_paragraph_runs():
    doc = Document(id="d", text="First block here.\n\nfirst   BLOCK here.\n\nSecond block here.")
    out = dedup_consecutive(doc)
    assert out.text == "First block here.\n\nSecond block here."


def test_dedup_cross_first_occurrence_wins():
    s1 = Shard("s1", [Document(id="a", text="Shared paragraph text here.")])
    s2 = Shard("s2", [Document(id="b", text="shared  paragraph TEXT here.\n\nFresh paragraph here.")])
    out, stats = dedup_cross([s1, s2])
    assert [d.id for d in out[0].docs] == ["a"]
    assert out[1].docs[0].text == "Fresh paragraph here."
    assert stats["paragraphs_removed"] == 1
    assert stats["pairs"] == {"s1->s2": 1}


def test_dedup_cross_drops_fully_duplicate_document():
    s1 = Shard("s1", [Document(id="a", text="Only paragraph here.")])
    s2 = Shard("s2", [Document(id="b", text="only paragraph HERE.")])
    out, stats = dedup_cross([s1, s2])
    assert out[1].docs == []
    assert stats["drops"] == [("b", "duplicate")]


def test_hash64_normalizes_case_and_whitespace_only():
    assert hash64("A  b C") == hash64("a b c")
    assert hash64("a b c.") != hash64("a b c")
    assert len(hash64("x")) == 16  # 64-bit hex


# --- config and shard io -------------------------------------------------------------


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(density_threshold=1.5)
    with pytest.raises(ConfigError):
        PipelineConfig(ngram_order=0)
    with pytest.raises(ConfigError):
        PipelineConfig(ppl_threshold=0.0)
    with pytest.raises(ConfigError):
        PipelineConfig(terminal_punct="")


def test_shard_round_trip(tmp_path):
    shard = Shard("s1", [Document(id="a", text="Text with unicode: 你好。", source="web")])
    path = tmp_path / "s1.jsonl"
    save_shard(path, shard)
    loaded = load_shard(path)
    assert loaded.name == "s1"
    assert loaded.docs[0].text == "Text with unicode: 你好。"
    assert loaded.docs[0].source == "web"


def test_load_shard_rejects_malformed_lines(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "text": "x", "source": "s"}\nnot json\n', encoding="utf-8")
    with pytest.raises(ValueError, match="bad.jsonl:2"):
        load_shard(bad)
    bad.write_text('{"id": "a", "source": "s"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="text"):
        load_shard(bad)


# --- end-to-end pipeline ----------------------------------------------------------------


def planted_fixture():
    """Two shards with exactly one violation per stage plus clean documents.

    a1 lacks terminal punctuation (rule_clean), b1 is gibberish (perplexity),
    c1 is all stopwords (keyword_density), e1 repeats a sentence (one concat
    merge, one consecutive-dedup removal), f1 duplicates a clean paragraph
    from the other shard (cross dedup).
    """
    shard1 = Shard("s1", [
        Document(id="good1", text=REF[0].capitalize() + " " + REF[1].capitalize()),
        Document(id="a1", text="no punctuation here at all"),
        Document(id="b1", text="Zq vrk plm wn xj qqf brr zk."),
        Document(id="c1", text="The and of is in the and of is in."),
        Document(id="e1", text="The greens grow tall. The greens grow tall."),
    ])
    shard2 = Shard("s2", [
        Document(id="good2", text=REF[2].capitalize() + " " + REF[3].capitalize()),
        Document(id="f1", text=REF[0].capitalize()),
    ])
    return [shard1, shard2]


def calibrated_cfg():
    model = train_ngram(REF, 3)
    keep = [perplexity(model, t) for t in
            ["the northern garden holds rows of hardy winter greens.",
             "the greens grow tall.",
             "the and of is in the and of is in."]]
    reject = perplexity(model, "zq vrk plm wn xj qqf brr zk.")
    threshold = max(keep) * 1.5
    assert threshold < reject  # the fixture separates cleanly
    return base_cfg(ppl_threshold=threshold)


def test_pipeline_reports_exactly_one_violation_per_stage():
    out, report = pipeline_run(planted_fixture(), calibrated_cfg())
    assert report["rule_clean"]["dropped_docs"] == 1
    assert report["rule_clean"]["drops"] == [("a1", "empty")]
    assert report["perplexity"]["dropped_docs"] == 1
    assert report["perplexity"]["drops"][0][0] == "b1"
    assert report["perplexity"]["drops"][0][1].startswith("ppl=")
    assert report["keyword_density"]["dropped_docs"] == 1
    assert report["keyword_density"]["drops"] == [("c1", "low_density")]
    assert report["concat_sentences"]["merges"] == 1
    assert report["dedup_consecutive"]["units_removed"] == 1
    assert report["dedup_cross"]["dropped_docs"] == 1
    assert report["dedup_cross"]["drops"] == [("f1", "duplicate")]
    assert report["dedup_cross"]["pairs"] == {"s1->s2": 1}
    assert [d.id for d in out[0].docs] == ["good1", "e1"]
    assert [d.id for d in out[1].docs] == ["good2"]


def test_pipeline_counts_are_monotone_and_consistent():
    _, report = pipeline_run(planted_fixture(), calibrated_cfg())
    for stage, entry in report.items():
        assert entry["output_docs"] <= entry["input_docs"], stage
        assert entry["input_docs"] - entry["output_docs"] == entry["dropped_docs"], stage
    # stages chain: output of one is input of the next
    stages = list(report)
    for prev, nxt in zip(stages, stages[1:]):
        assert report[prev]["output_docs"] == report[nxt]["input_docs"]


def test_pipeline_is_idempotent():
    cfg = calibrated_cfg()
    out, _ = pipeline_run(planted_fixture(), cfg)
    texts = [(d.id, d.text) for s in out for d in s.docs]
    out2, report2 = pipeline_run(out, cfg)
    assert [(d.id, d.text) for s in out2 for d in s.docs] == texts
    for entry in report2.values():
        assert entry["dropped_docs"] == 0
    assert report2["concat_sentences"]["merges"] == 0
    assert report2["dedup_consecutive"]["units_removed"] == 0
    assert report2["dedup_cross"]["paragraphs_removed"] == 0


def test_pipeline_is_deterministic_byte_for_byte(tmp_path):
    payloads = []
    for run in ("x", "y"):
        out, report = pipeline_run(planted_fixture(), calibrated_cfg())
        paths = []
        for shard in out:
            p = tmp_path / f"{run}-{shard.name}.jsonl"
            save_shard(p, shard)
            paths.append(p)
        blob = b"".join(p.read_bytes() for p in paths)
        blob += json.dumps(report, sort_keys=True).encode()
        payloads.append(blob)
    assert payloads[0] == payloads[1]


def test_pipeline_empty_input_yields_zero_report():
    out, report = pipeline_run([Shard("s1", [])], base_cfg())
    assert out[0].docs == []
    for entry in report.values():
        assert entry["input_docs"] == 0 and entry["dropped_docs"] == 0


def test_pipeline_does_not_fabricate_text():
    # every sentence in the output was emitted by the cleaning stage
    cfg = calibrated_cfg()
    allowed = set()
    for shard in planted_fixture():
        for doc in shard.docs:
            cleaned = rule_clean(Document(id=doc.id, text=doc.text), cfg)
            if not cleaned.rejected:
                for para in cleaned.text.split("\n\n"):
                    allowed.add(normalize(para))
    out, _ = pipeline_run(planted_fixture(), cfg)
    for shard in out:
        for doc in shard.docs:
            for sent in split_sentences(doc.text.replace("\n\n", " "), cfg.terminal_punct):
                assert normalize(sent) in allowed


def test_every_drop_carries_a_reason():
    out, report = pipeline_run(planted_fixture(), calibrated_cfg())
    for entry in report.values():
        for doc_id, reason in entry.get("drops", []):
            assert isinstance(doc_id, str) and reason


def test_tokenize_and_normalize_helpers():
    assert tokenize("Hello, WORLD 你好!") == ["hello", "world", "你好"]
    assert normalize("  A  B\n\nc ") == "a b c"


def test_ngram_model_rejects_bad_parameters():
    with pytest.raises(ValueError):
        NgramModel(0)
    with pytest.raises(ValueError):
        NgramModel(2, add_k=-1.0)
    with pytest.raises(ValueError):
        NgramModel(2, lam=1.0)
