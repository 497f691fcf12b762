"""Corpus cleaning pipeline.

Fixed stage order: rule cleaning, perplexity filtering under an n-gram
reference model, keyword-density filtering, sentence concatenation,
consecutive deduplication, cross-shard deduplication. Documents carry an
append-only stage log; every drop, redaction, merge, and removal is logged
with a machine-readable reason.

Text normal form between stages: paragraphs separated by blank lines,
sentences inside a paragraph separated by single spaces. Every sentence
ends with terminal punctuation, so the form re-parses losslessly.
"""

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError

UNK = "<unk>"

_TAG_BLOCKS = re.compile(r"<(script|style)\b[^>]*>.*?</\1\s*>", re.IGNORECASE | re.DOTALL)
_TAGS = re.compile(r"<[^>\n]{0,200}>")


@dataclass
class Document:
    id: str
    text: str
    source: str = ""
    stage_log: list = field(default_factory=list)  # (stage, action, reason)

    def log(self, stage: str, action: str, reason: str) -> None:
        self.stage_log.append((stage, action, reason))

    @property
    def rejected(self) -> bool:
        return any(action == "reject" for _, action, _ in self.stage_log)

    def reject_reason(self) -> str | None:
        for _, action, reason in self.stage_log:
            if action == "reject":
                return reason
        return None


@dataclass
class Shard:
    name: str
    docs: list


@dataclass(frozen=True)
class PipelineConfig:
    min_sentence_len: int = 8
    terminal_punct: str = ".!?。！？"
    url_pattern: str = r"https?://\S+|www\.\S+"
    pii_patterns: tuple = (r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+",
                           r"\+?\d[\d\s().-]{7,}\d")
    blocklist: frozenset = frozenset()
    ppl_threshold: float = 1e9
    ngram_order: int = 3
    density_threshold: float = 0.2
    stopwords: frozenset = frozenset()
    concat_sim_threshold: float = 0.5
    ppl_reference: tuple = ()  # reference texts; empty disables the ppl stage

    def __post_init__(self):
        object.__setattr__(self, "blocklist", frozenset(w.lower() for w in self.blocklist))
        object.__setattr__(self, "stopwords", frozenset(w.lower() for w in self.stopwords))
        object.__setattr__(self, "ppl_reference", tuple(self.ppl_reference))
        if self.ngram_order < 1:
            raise ConfigError("ngram_order must be >= 1")
        if not 0 <= self.density_threshold <= 1:
            raise ConfigError("density_threshold must lie in [0, 1]")
        if not 0 <= self.concat_sim_threshold <= 1:
            raise ConfigError("concat_sim_threshold must lie in [0, 1]")
        if self.ppl_threshold <= 0:
            raise ConfigError("ppl_threshold must be positive")
        if self.min_sentence_len < 1:
            raise ConfigError("min_sentence_len must be >= 1")
        if not self.terminal_punct:
            raise ConfigError("terminal_punct must be non-empty")


def tokenize(text: str) -> list[str]:
    return re.findall(r"\w+", text.lower())


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace; punctuation is preserved."""
    return " ".join(text.lower().split())


def hash64(text: str) -> str:
    return hashlib.blake2b(normalize(text).encode("utf-8"), digest_size=8).hexdigest()


def split_sentences(text: str, terminal: str) -> list[str]:
    """Split on terminal punctuation followed by whitespace or end of text."""
    out, buf = [], []
    n = len(text)
    for i, ch in enumerate(text):
        buf.append(ch)
        if ch in terminal and (i + 1 == n or text[i + 1].isspace()):
            s = "".join(buf).strip()
            if s:
                out.append(s)
            buf = []
    tail = "".join(buf).strip()
    if tail:
        out.append(tail)
    return out


def parse_paragraphs(text: str, terminal: str) -> list[list[str]]:
    paras = []
    for block in text.split("\n\n"):
        block = block.strip()
        if block:
            paras.append(split_sentences(block, terminal))
    return paras


def render_paragraphs(paras: list[list[str]]) -> str:
    return "\n\n".join(" ".join(sents) for sents in paras)


# --- stage 1: rule cleaning ---------------------------------------------------

def rule_clean(doc: Document, cfg: PipelineConfig) -> Document:
    """Strip markup, segment sentences, redact URLs/PII, apply length,
    punctuation, and blocklist rules. Rejects when nothing survives.

    Redaction runs before the punctuation and length checks so that the
    surviving text re-passes the same rules (the pipeline is a fixed point
    on its own output).
    """
    try:
        doc.text.encode("utf-8")
    except UnicodeEncodeError:
        doc.log("rule_clean", "reject", "encoding")
        return doc

    text = _TAG_BLOCKS.sub(" ", doc.text)
    text = _TAGS.sub(" ", text)
    url_re = re.compile(cfg.url_pattern)
    pii_res = [re.compile(p) for p in cfg.pii_patterns]

    kept = []
    for sent in split_sentences(text, cfg.terminal_punct):
        redacted, n_url = url_re.subn("", sent)
        if n_url:
            doc.log("rule_clean", "redact", "url")
        for rx in pii_res:
            redacted, n_pii = rx.subn("", redacted)
            if n_pii:
                doc.log("rule_clean", "redact", "pii")
        redacted = " ".join(redacted.split())
        if not redacted or redacted[-1] not in cfg.terminal_punct:
            doc.log("rule_clean", "drop_sentence", "no_terminal_punct")
            continue
        if len(redacted) < cfg.min_sentence_len:
            doc.log("rule_clean", "drop_sentence", "too_short")
            continue
        if cfg.blocklist and any(t in cfg.blocklist for t in tokenize(redacted)):
            doc.log("rule_clean", "drop_sentence", "blocklist")
            continue
        kept.append(redacted)

    if not kept:
        doc.log("rule_clean", "reject", "empty")
        return doc
    doc.text = render_paragraphs([[s] for s in kept])  # one sentence per paragraph
    return doc


# --- stage 2: perplexity filtering ---------------------------------------------

class NgramModel:
    """Interpolated n-gram model with an add-k unigram floor and <unk>.

    Each level mixes its maximum-likelihood estimate with the level below
    (weight lam); an unseen context passes all weight down. Conditional
    distributions over vocab + <unk> therefore sum to 1 for any context.
    """

    def __init__(self, order: int, add_k: float = 1.0, lam: float = 0.7):
        if order < 1:
            raise ValueError("order must be >= 1")
        if add_k < 0 or not 0 < lam < 1:
            raise ValueError("need add_k >= 0 and 0 < lam < 1")
        self.order = order
        self.add_k = add_k
        self.lam = lam
        self.vocab: set[str] = set()
        self.counts = [dict() for _ in range(order)]  # counts[k]: (ctx len k) -> Counter
        self.totals = [dict() for _ in range(order)]
        self.unigram_total = 0

    def _norm(self, word: str) -> str:
        return word if word in self.vocab else UNK

    def prob(self, word: str, context: tuple) -> float:
        ctx = tuple(self._norm(w) for w in context)[-(self.order - 1):] if self.order > 1 else ()
        return self._p(self._norm(word), ctx)

    def _p(self, w: str, ctx: tuple) -> float:
        if not ctx:
            v = len(self.vocab) + 1  # vocab plus <unk>
            c = self.counts[0].get((), Counter()).get(w, 0)
            return (c + self.add_k) / (self.unigram_total + self.add_k * v)
        table = self.counts[len(ctx)].get(ctx)
        lower = self._p(w, ctx[1:])
        if not table:
            return lower
        ml = table.get(w, 0) / self.totals[len(ctx)][ctx]
        return self.lam * ml + (1 - self.lam) * lower


def train_ngram(corpus, order: int = 3, add_k: float = 1.0, lam: float = 0.7) -> NgramModel:
    """Count n-grams of every order up to `order` over the given texts."""
    model = NgramModel(order, add_k=add_k, lam=lam)
    token_lists = [tokenize(t) for t in corpus]
    all_tokens = [t for toks in token_lists for t in toks]
    if not all_tokens:
        raise ValueError("cannot train an n-gram model on an empty corpus")
    model.vocab = set(all_tokens)
    for toks in token_lists:
        for i, w in enumerate(toks):
            for k in range(min(order - 1, i) + 1):
                ctx = tuple(toks[i - k:i])
                table = model.counts[k].setdefault(ctx, Counter())
                table[w] += 1
                model.totals[k][ctx] = model.totals[k].get(ctx, 0) + 1
    model.unigram_total = len(all_tokens)
    return model


def perplexity(model: NgramModel, text: str) -> float:
    """exp of mean negative log-probability per token."""
    toks = tokenize(text)
    if not toks:
        raise ValueError("perplexity of empty text")
    nll = 0.0
    for i, w in enumerate(toks):
        ctx = tuple(toks[max(0, i - (model.order - 1)):i])
        p = model.prob(w, ctx)
        if p <= 0.0:
            return math.inf
        nll -= math.log(p)
    return math.exp(nll / len(toks))


# --- stage 3: keyword density ----------------------------------------------------

def keyword_density(text: str, stopwords: frozenset) -> float | None:
    toks = tokenize(text)
    if not toks:
        return None
    hits = sum(1 for t in toks if t not in stopwords)
    return hits / len(toks)


def keyword_density_filter(doc: Document, cfg: PipelineConfig) -> bool:
    """Keep iff the non-stopword fraction reaches the threshold (ties keep)."""
    d = keyword_density(doc.text, cfg.stopwords)
    if d is None:
        doc.log("keyword_density", "reject", "empty")
        return False
    if d < cfg.density_threshold:
        doc.log("keyword_density", "reject", "low_density")
        return False
    return True


# --- stage 4: sentence concatenation ----------------------------------------------

def tf_cosine(a: str, b: str) -> float:
    ta, tb = Counter(tokenize(a)), Counter(tokenize(b))
    if not ta or not tb:
        return 0.0
    dot = sum(ta[w] * tb[w] for w in ta.keys() & tb.keys())
    na = math.sqrt(sum(v * v for v in ta.values()))
    nb = math.sqrt(sum(v * v for v in tb.values()))
    return dot / (na * nb)


def concat_sentences(doc: Document, cfg: PipelineConfig) -> Document:
    """Merge adjacent units into one paragraph while their term-frequency
    cosine similarity clears the threshold. Stands in for a learned
    relatedness classifier; isolated here so one can be substituted."""
    paras = parse_paragraphs(doc.text, cfg.terminal_punct)
    if not paras:
        return doc
    merged = [paras[0]]
    for p in paras[1:]:
        if tf_cosine(" ".join(merged[-1]), " ".join(p)) >= cfg.concat_sim_threshold:
            merged[-1] = merged[-1] + p
            doc.log("concat_sentences", "merge", "similar")
        else:
            merged.append(p)
    doc.text = render_paragraphs(merged)
    return doc


# --- stage 5: consecutive dedup -----------------------------------------------------

def dedup_consecutive(doc: Document, terminal: str = ".!?。！？") -> Document:
    """Collapse runs of identical normalized sentences inside each paragraph,
    then runs of identical normalized paragraphs."""
    paras = parse_paragraphs(doc.text, terminal)
    out_paras = []
    for sents in paras:
        out_s = []
        for s in sents:
            if out_s and normalize(s) == normalize(out_s[-1]):
                doc.log("dedup_consecutive", "remove", "duplicate_sentence")
                continue
            out_s.append(s)
        out_paras.append(out_s)
    deduped = []
    for p in out_paras:
        if deduped and normalize(" ".join(p)) == normalize(" ".join(deduped[-1])):
            doc.log("dedup_consecutive", "remove", "duplicate_paragraph")
            continue
        deduped.append(p)
    doc.text = render_paragraphs(deduped)
    return doc


# --- stage 6: cross-shard dedup -------------------------------------------------------

def dedup_cross(shards: list[Shard], terminal: str = ".!?。！？") -> tuple[list[Shard], dict]:
    """Remove repeated paragraphs across all shards; first occurrence (in
    shard order, then document order) wins. 64-bit hashes; collision risk
    is accepted at this scale."""
    seen: dict[str, str] = {}  # hash -> shard name of first occurrence
    pair_counts: dict[str, int] = {}
    removed = 0
    drops = []
    out_shards = []
    for shard in shards:
        out_docs = []
        for doc in shard.docs:
            kept_paras = []
            for sents in parse_paragraphs(doc.text, terminal):
                h = hash64(" ".join(sents))
                if h in seen:
                    key = f"{seen[h]}->{shard.name}"
                    pair_counts[key] = pair_counts.get(key, 0) + 1
                    removed += 1
                    doc.log("dedup_cross", "remove", "duplicate_paragraph")
                    continue
                seen[h] = shard.name
                kept_paras.append(sents)
            if not kept_paras:
                doc.log("dedup_cross", "reject", "duplicate")
                drops.append((doc.id, "duplicate"))
                continue
            doc.text = render_paragraphs(kept_paras)
            out_docs.append(doc)
        out_shards.append(Shard(name=shard.name, docs=out_docs))
    stats = {"paragraphs_removed": removed, "pairs": pair_counts, "drops": drops}
    return out_shards, stats


# --- the pipeline ---------------------------------------------------------------------

STAGES = ("rule_clean", "perplexity", "keyword_density", "concat_sentences",
          "dedup_consecutive", "dedup_cross")


def pipeline_run(shards: list[Shard], cfg: PipelineConfig) -> tuple[list[Shard], dict]:
    """Run every stage in fixed order; returns cleaned shards and a report
    of per-stage document counts, drops, and unit removals.

    Documents are mutated in place; counters only reflect log entries
    appended during this run, so re-running on the output reports zeros.
    """
    model = train_ngram(cfg.ppl_reference, cfg.ngram_order) if cfg.ppl_reference else None
    report: dict = {}
    new_actions: dict = {}  # (stage, action) -> count, this run only

    def apply(doc, fn):
        before = len(doc.stage_log)
        verdict = fn(doc)
        for stage, action, _ in doc.stage_log[before:]:
            key = (stage, action)
            new_actions[key] = new_actions.get(key, 0) + 1
        return verdict

    def doc_stage(name, shards_in, decide):
        n_in = sum(len(s.docs) for s in shards_in)
        drops = []
        out = []
        for shard in shards_in:
            kept = []
            for doc in shard.docs:
                if apply(doc, decide):
                    kept.append(doc)
                else:
                    drops.append((doc.id, doc.reject_reason() or "dropped"))
            out.append(Shard(name=shard.name, docs=kept))
        report[name] = {"input_docs": n_in,
                        "output_docs": sum(len(s.docs) for s in out),
                        "dropped_docs": len(drops), "drops": drops}
        return out

    current = [Shard(name=s.name, docs=list(s.docs)) for s in shards]

    current = doc_stage("rule_clean", current,
                        lambda d: not rule_clean(d, cfg).rejected)
    report["rule_clean"]["sentences_dropped"] = new_actions.get(("rule_clean", "drop_sentence"), 0)
    report["rule_clean"]["redactions"] = new_actions.get(("rule_clean", "redact"), 0)

    def ppl_ok(doc):
        if model is None:
            return True
        p = perplexity(model, doc.text)
        if p > cfg.ppl_threshold:
            doc.log("perplexity", "reject", f"ppl={p:.1f}")
            return False
        return True

    current = doc_stage("perplexity", current, ppl_ok)
    current = doc_stage("keyword_density", current,
                        lambda d: keyword_density_filter(d, cfg))

    n_docs = sum(len(s.docs) for s in current)
    for shard in current:
        for doc in shard.docs:
            apply(doc, lambda d: concat_sentences(d, cfg))
    report["concat_sentences"] = {"input_docs": n_docs, "output_docs": n_docs,
                                  "dropped_docs": 0, "drops": [],
                                  "merges": new_actions.get(("concat_sentences", "merge"), 0)}

    for shard in current:
        for doc in shard.docs:
            apply(doc, lambda d: dedup_consecutive(d, cfg.terminal_punct))
    report["dedup_consecutive"] = {"input_docs": n_docs, "output_docs": n_docs,
                                   "dropped_docs": 0, "drops": [],
                                   "units_removed": new_actions.get(("dedup_consecutive",
                                                                     "remove"), 0)}

    current, stats = dedup_cross(current, cfg.terminal_punct)
    report["dedup_cross"] = {"input_docs": n_docs,
                             "output_docs": sum(len(s.docs) for s in current),
                             "dropped_docs": len(stats["drops"]),
                             "drops": stats["drops"],
                             "paragraphs_removed": stats["paragraphs_removed"],
                             "pairs": stats["pairs"]}
    return current, report


# --- shard files ------------------------------------------------------------------------

def load_shard(path, name: str | None = None) -> Shard:
    """UTF-8 JSONL, one object per line with id, text, source."""
    import os
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            for k in ("id", "text", "source"):
                if k not in rec or not isinstance(rec[k], str):
                    raise ValueError(f"{path}:{lineno}: missing string field {k!r}")
            docs.append(Document(id=rec["id"], text=rec["text"], source=rec["source"]))
    return Shard(name=name or os.path.splitext(os.path.basename(str(path)))[0], docs=docs)


def save_shard(path, shard: Shard) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in shard.docs:
            f.write(json.dumps({"id": doc.id, "text": doc.text, "source": doc.source},
                               ensure_ascii=False, sort_keys=True) + "\n")
