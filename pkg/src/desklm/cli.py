"""Command-line entry point.

One binary, subcommand style: prepare-data, train-tokenizer, train, sft,
dpo, generate, bench. Common flags: --config, --seed, --threads, --out.
Flag values override config-file keys. Exit codes: 0 success, 1 runtime
failure, 2 usage error.

Every successful run writes run_manifest.json (atomically) into the output
directory: command, resolved config snapshot, input/output paths, seed,
timestamps, and sha256 checksums of the artifacts. Heavy imports happen
inside command bodies so the --threads cap is in place first.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

_STRATEGY_NAMES = ("replace", "skip", "egs", "lr")


def _strategy_csv(text):
    if text in ("", "none"):
        return ()
    parts = tuple(text.split(","))
    bad = [p for p in parts if p not in _STRATEGY_NAMES]
    if bad:
        raise argparse.ArgumentTypeError(
            f"unknown strategies {bad}; choose from {','.join(_STRATEGY_NAMES)}")
    canonical = [s for s in _STRATEGY_NAMES if s in parts]
    if list(parts) != canonical:
        raise argparse.ArgumentTypeError(
            f"strategies must appear in canonical order {','.join(_STRATEGY_NAMES)}")
    return parts


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="desklm",
                                     description="Desk-scale language model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=_positive_int, default=1,
                       help="cap numeric worker threads (set before numpy loads)")
        p.add_argument("--out", default="desklm-out", help="output directory")

    p = sub.add_parser("prepare-data", help="run the corpus cleaning pipeline")
    p.add_argument("shards", nargs="+", help="input JSONL shard files")
    common(p)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train-tokenizer", help="train a byte-level BPE vocabulary")
    p.add_argument("corpus", nargs="+", help="input UTF-8 text files")
    common(p)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train", help="pretrain with the stabilized loop")
    common(p)
    p.add_argument("--steps", type=_positive_int, default=None, help="override config steps")
    p.add_argument("--spike-strategies", type=_strategy_csv, default=None,
                   metavar="CSV", help="subset of replace,skip,egs,lr; 'none' disables")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sft", help="supervised finetuning on prompt/response pairs")
    common(p)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("dpo", help="preference optimization against a frozen reference")
    common(p)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("generate", help="sample tokens from a checkpoint")
    common(p)
    p.add_argument("--prompt", default=None, help="override config prompt text")
    p.add_argument("--max-new-tokens", type=_positive_int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="KV-cache decode throughput benchmark")
    common(p)
    p.add_argument("--prompt-len", type=_positive_int, default=None)
    p.add_argument("--gen-len", type=_positive_int, default=None)
    p.add_argument("--repeats", type=_positive_int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    from .errors import TracingError
    try:
        return args.func(args)
    except (OSError, ValueError, TracingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


# --- manifest plumbing ---------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs,
                   seed: int, started: str) -> Path:
    manifest = {
        "command": command,
        "config": {k: str(v) for k, v in sorted(config.items())},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "started": started,
        "ended": _now(),
        "checksums": {Path(p).name: _sha256(Path(p)) for p in outputs},
    }
    path = out_dir / "run_manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
    return path


def _load_cfg(args) -> dict:
    from .configio import load_config
    return load_config(args.config) if args.config else {}


def _load_params(path):
    """Accept either a plain model checkpoint or a training checkpoint
    (which carries optimizer state alongside the parameters)."""
    from .checkpoint import load_checkpoint
    try:
        return load_checkpoint(path)
    except ValueError:
        from .train import load_train_checkpoint
        state, model_cfg, _, _ = load_train_checkpoint(path)
        return state.params, model_cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    from . import corpus
    from .configio import get_float, get_int, get_str
    cfg_pairs = _load_cfg(args)

    def split_list(key):
        raw = get_str(cfg_pairs, key, "")
        return tuple(s for s in (p.strip() for p in raw.split(",")) if s)

    ref_path = get_str(cfg_pairs, "ppl_reference", "")
    reference = ()
    if ref_path:
        with open(ref_path, encoding="utf-8") as f:
            reference = tuple(line.strip() for line in f if line.strip())
    pii_raw = get_str(cfg_pairs, "pii_patterns", "")
    defaults = corpus.PipelineConfig()
    pcfg = corpus.PipelineConfig(
        min_sentence_len=get_int(cfg_pairs, "min_sentence_len", defaults.min_sentence_len),
        terminal_punct=get_str(cfg_pairs, "terminal_punct", defaults.terminal_punct),
        url_pattern=get_str(cfg_pairs, "url_pattern", defaults.url_pattern),
        pii_patterns=tuple(pii_raw.split("||")) if pii_raw else defaults.pii_patterns,
        blocklist=frozenset(split_list("blocklist")),
        ppl_threshold=get_float(cfg_pairs, "ppl_threshold", defaults.ppl_threshold),
        ngram_order=get_int(cfg_pairs, "ngram_order", defaults.ngram_order),
        density_threshold=get_float(cfg_pairs, "density_threshold",
                                    defaults.density_threshold),
        stopwords=frozenset(split_list("stopwords")),
        concat_sim_threshold=get_float(cfg_pairs, "concat_sim_threshold",
                                       defaults.concat_sim_threshold),
        ppl_reference=reference,
    )

    started = _now()
    shards = [corpus.load_shard(p) for p in args.shards]
    cleaned, report = corpus.pipeline_run(shards, pcfg)
    out = _out_dir(args)
    outputs = []
    for shard in cleaned:
        path = out / f"{shard.name}.jsonl"
        corpus.save_shard(path, shard)
        outputs.append(path)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    outputs.append(report_path)
    snapshot = dict(cfg_pairs)
    write_manifest(out, "prepare-data", snapshot, args.shards, outputs, args.seed, started)
    kept = sum(len(s.docs) for s in cleaned)
    print(f"prepare-data: {kept} documents kept across {len(cleaned)} shards")
    return 0


def cmd_train_tokenizer(args) -> int:
    from . import bpe
    from .configio import get_int
    cfg_pairs = _load_cfg(args)
    target = get_int(cfg_pairs, "target_size", bpe.DEFAULT_TARGET_SIZE)
    started = _now()
    texts = [Path(p).read_text(encoding="utf-8") for p in args.corpus]
    vocab = bpe.bpe_train(texts, target)
    out = _out_dir(args)
    vocab_path = out / "vocab.txt"
    bpe.save_vocab(vocab_path, vocab)
    snapshot = dict(cfg_pairs)
    snapshot["target_size"] = target
    write_manifest(out, "train-tokenizer", snapshot, args.corpus, [vocab_path],
                   args.seed, started)
    print(f"train-tokenizer: {len(vocab)} entries, {len(vocab.merges)} merges")
    return 0


def _model_config(cfg_pairs):
    from .configio import get_float, get_int, get_str
    from .model import ModelConfig, ffn_size_for
    hidden = get_int(cfg_pairs, "model.hidden_size")
    return ModelConfig(
        vocab_size=get_int(cfg_pairs, "model.vocab_size"),
        hidden_size=hidden,
        ffn_size=get_int(cfg_pairs, "model.ffn_size", ffn_size_for(hidden)),
        n_heads=get_int(cfg_pairs, "model.n_heads"),
        n_layers=get_int(cfg_pairs, "model.n_layers"),
        kv_groups=get_int(cfg_pairs, "model.kv_groups"),
        max_seq_len=get_int(cfg_pairs, "model.max_seq_len"),
        norm_eps=get_float(cfg_pairs, "model.norm_eps", 1e-5),
        rope_base=get_float(cfg_pairs, "model.rope_base", 10000.0),
        norm_placement=get_str(cfg_pairs, "model.norm_placement", "post"),
        init_std=get_float(cfg_pairs, "model.init_std", 0.02),
    )


def _opt_config(cfg_pairs, total_steps):
    from .configio import get_float, get_int
    from .train import OptimizerConfig
    d = OptimizerConfig()
    return OptimizerConfig(
        lr_peak=get_float(cfg_pairs, "opt.lr_peak", d.lr_peak),
        lr_min=get_float(cfg_pairs, "opt.lr_min", d.lr_min),
        warmup_steps=get_int(cfg_pairs, "opt.warmup_steps", d.warmup_steps),
        total_steps=total_steps,
        beta1=get_float(cfg_pairs, "opt.beta1", d.beta1),
        beta2=get_float(cfg_pairs, "opt.beta2", d.beta2),
        eps=get_float(cfg_pairs, "opt.eps", d.eps),
        weight_decay=get_float(cfg_pairs, "opt.weight_decay", d.weight_decay),
    )


def _read_token_file(path):
    import numpy as np
    text = Path(path).read_text(encoding="utf-8")
    ids = [int(t) for t in text.split()]
    if not ids:
        raise ValueError(f"{path}: no token ids found")
    return np.asarray(ids, dtype=np.int64)


def cmd_train(args) -> int:
    from .configio import get_int, get_str
    from .model import init_params
    from .train import SpikeConfig, init_train_state, make_batches, train_loop
    cfg_pairs = _load_cfg(args)
    model_cfg = _model_config(cfg_pairs)
    steps = args.steps if args.steps is not None else get_int(cfg_pairs, "steps", 100)
    opt = _opt_config(cfg_pairs, total_steps=steps)
    d = SpikeConfig()
    strategies = args.spike_strategies
    if strategies is None:
        raw = get_str(cfg_pairs, "spike.strategy_order",
                      ",".join(d.strategy_order))
        strategies = _strategy_csv(raw) if raw not in ("", "none") else ()
    from .configio import get_float
    spike = SpikeConfig(
        window=get_int(cfg_pairs, "spike.window", d.window),
        sigma_mult=get_float(cfg_pairs, "spike.sigma_mult", d.sigma_mult),
        skip_radius=get_int(cfg_pairs, "spike.skip_radius", d.skip_radius),
        egs_alpha=get_float(cfg_pairs, "spike.egs_alpha", d.egs_alpha),
        lr_shrink=get_float(cfg_pairs, "spike.lr_shrink", d.lr_shrink),
        strategy_order=strategies,
    )
    data_path = get_str(cfg_pairs, "data")
    batch_size = get_int(cfg_pairs, "batch_size", 4)
    seq_len = get_int(cfg_pairs, "seq_len", 32)
    checkpoint_every = get_int(cfg_pairs, "checkpoint_every", 0)

    started = _now()
    ids = _read_token_file(data_path)
    batches = make_batches(ids, batch_size, seq_len, seed=args.seed)
    params = init_params(model_cfg, seed=args.seed)
    state = init_train_state(params)
    out = _out_dir(args)
    result = train_loop(state, model_cfg, opt, spike, batches, steps,
                        out_dir=out, checkpoint_every=checkpoint_every)
    actions_path = out / "actions.log"
    actions_path.write_text("".join(a + "\n" for a in result.actions), encoding="utf-8")
    outputs = sorted(p for p in out.iterdir() if p.name != "run_manifest.json")
    snapshot = dict(cfg_pairs)
    snapshot["steps"] = steps
    snapshot["spike.strategy_order"] = ",".join(strategies) if strategies else "none"
    write_manifest(out, "train", snapshot, [data_path], outputs, args.seed, started)
    last = result.curve[-1].loss if result.curve else float("nan")
    print(f"train: {result.state.step} steps, final loss {last:.4f}"
          + (" [diverged]" if result.state.diverged else ""))
    return 0


def _finetune_common(args):
    from .configio import get_int, get_str
    from .train import init_train_state
    cfg_pairs = _load_cfg(args)
    ckpt_path = get_str(cfg_pairs, "checkpoint")
    data_path = get_str(cfg_pairs, "data")
    steps = args.steps if args.steps is not None else get_int(cfg_pairs, "steps", 50)
    opt = _opt_config(cfg_pairs, total_steps=steps)
    started = _now()
    params, model_cfg = _load_params(ckpt_path)
    state = init_train_state(params)
    return cfg_pairs, ckpt_path, data_path, steps, opt, started, params, model_cfg, state


def _write_losses(out, name, losses):
    path = out / name
    rows = ["step,loss"] + [f"{s},{loss!r}" for s, loss in losses]
    path.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def _load_vocab_for(cfg_pairs):
    from .bpe import load_vocab
    from .configio import get_str
    vocab_path = get_str(cfg_pairs, "vocab")
    return vocab_path, load_vocab(vocab_path)


def cmd_sft(args) -> int:
    from .align import SftExample, load_sft_records, sft_finetune
    from .bpe import EOS_ID, encode
    from .checkpoint import save_checkpoint
    (cfg_pairs, ckpt_path, data_path, steps, opt, started,
     params, model_cfg, state) = _finetune_common(args)
    vocab_path, vocab = _load_vocab_for(cfg_pairs)
    examples = [SftExample(prompt_tokens=encode(r["prompt"], vocab),
                           response_tokens=encode(r["response"], vocab) + [EOS_ID])
                for r in load_sft_records(data_path)]
    losses = sft_finetune(state, model_cfg, opt, examples, steps)
    out = _out_dir(args)
    final = out / "ckpt-final.ckpt"
    save_checkpoint(final, state.params, model_cfg)
    curve = _write_losses(out, "sft_curve.csv", losses)
    snapshot = dict(cfg_pairs)
    snapshot["steps"] = steps
    write_manifest(out, "sft", snapshot, [ckpt_path, data_path, vocab_path],
                   [final, curve], args.seed, started)
    print(f"sft: {steps} steps, final loss {losses[-1][1]:.4f}")
    return 0


def cmd_dpo(args) -> int:
    from .align import DpoConfig, PreferencePair, dpo_finetune, load_preference_records
    from .bpe import EOS_ID, encode
    from .checkpoint import save_checkpoint
    from .configio import get_float
    (cfg_pairs, ckpt_path, data_path, steps, opt, started,
     params, model_cfg, state) = _finetune_common(args)
    vocab_path, vocab = _load_vocab_for(cfg_pairs)
    reference, _ = _load_params(ckpt_path)  # frozen copy of the start point
    dpo = DpoConfig(reference_params=reference,
                    beta=get_float(cfg_pairs, "beta", 0.1))
    pairs = [PreferencePair(prompt_tokens=encode(r["prompt"], vocab),
                            chosen_tokens=encode(r["chosen"], vocab) + [EOS_ID],
                            rejected_tokens=encode(r["rejected"], vocab) + [EOS_ID])
             for r in load_preference_records(data_path)]
    losses = dpo_finetune(state, model_cfg, opt, dpo, pairs, steps)
    out = _out_dir(args)
    final = out / "ckpt-final.ckpt"
    save_checkpoint(final, state.params, model_cfg)
    curve = _write_losses(out, "dpo_curve.csv", losses)
    snapshot = dict(cfg_pairs)
    snapshot["steps"] = steps
    write_manifest(out, "dpo", snapshot, [ckpt_path, data_path, vocab_path],
                   [final, curve], args.seed, started)
    print(f"dpo: {steps} steps, final loss {losses[-1][1]:.4f}")
    return 0


def cmd_generate(args) -> int:
    from .bpe import EOS_ID, decode, encode, load_vocab
    from .configio import get_float, get_int, get_str
    from .infer import SamplerConfig, generate
    cfg_pairs = _load_cfg(args)
    ckpt_path = get_str(cfg_pairs, "checkpoint")
    vocab_path = get_str(cfg_pairs, "vocab")
    prompt = args.prompt if args.prompt is not None else get_str(cfg_pairs, "prompt")
    max_new = (args.max_new_tokens if args.max_new_tokens is not None
               else get_int(cfg_pairs, "max_new_tokens", 32))
    scfg = SamplerConfig(temperature=get_float(cfg_pairs, "temperature", 1.0),
                         top_k=get_int(cfg_pairs, "top_k", 0),
                         seed=args.seed)
    started = _now()
    params, model_cfg = _load_params(ckpt_path)
    vocab = load_vocab(vocab_path)
    prompt_ids = encode(prompt, vocab)
    new_ids = generate(params, model_cfg, prompt_ids, max_new, scfg, eos_id=EOS_ID)
    all_ids = prompt_ids + new_ids
    text = decode(all_ids, vocab)
    out = _out_dir(args)
    gen_path = out / "generation.txt"
    gen_path.write_text(text + "\n", encoding="utf-8")
    ids_path = out / "generation_ids.txt"
    ids_path.write_text(" ".join(str(i) for i in all_ids) + "\n", encoding="utf-8")
    snapshot = dict(cfg_pairs)
    snapshot.update(prompt=prompt, max_new_tokens=max_new)
    write_manifest(out, "generate", snapshot, [ckpt_path, vocab_path],
                   [gen_path, ids_path], args.seed, started)
    print(text)
    return 0


def cmd_bench(args) -> int:
    from .configio import get_int, get_str
    from .infer import benchmark_throughput
    from .model import init_params
    cfg_pairs = _load_cfg(args)
    prompt_len = (args.prompt_len if args.prompt_len is not None
                  else get_int(cfg_pairs, "prompt_len", 16))
    gen_len = (args.gen_len if args.gen_len is not None
               else get_int(cfg_pairs, "gen_len", 64))
    repeats = (args.repeats if args.repeats is not None
               else get_int(cfg_pairs, "repeats", 3))
    started = _now()
    ckpt_path = get_str(cfg_pairs, "checkpoint", "")
    if ckpt_path:
        params, model_cfg = _load_params(ckpt_path)
        inputs = [ckpt_path]
    else:
        model_cfg = _model_config(cfg_pairs)
        params = init_params(model_cfg, seed=args.seed)
        inputs = []
    report = benchmark_throughput(params, model_cfg, prompt_len=prompt_len,
                                  decode_steps=gen_len, repeats=repeats, seed=args.seed)
    out = _out_dir(args)
    bench_path = out / "bench.txt"
    bench_path.write_text(report.render() + "\n", encoding="utf-8")
    snapshot = dict(cfg_pairs)
    snapshot.update(prompt_len=prompt_len, gen_len=gen_len, repeats=repeats)
    write_manifest(out, "bench", snapshot, inputs, [bench_path], args.seed, started)
    print(report.render())
    return 0


if __name__ == "__main__":
    sys.exit(main())
