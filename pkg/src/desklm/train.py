"""Stabilized pretraining loop.

AdamW with decoupled weight decay, cosine learning-rate decay with linear
warmup, and four loss-spike countermeasures: replace the offending batch
from a held-out reserve, exclude a window of iterations around the spike,
shrink the embedding gradient, and tighten the learning-rate peak. Skipped
iterations advance the data cursor but not the optimizer step.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ndops
from .checkpoint import MAGIC
from .configio import format_config, get_bool, get_float, get_int, get_str, parse_config
from .errors import ConfigError, StateError
from .model import ModelConfig, ModelParams, config_from_pairs, config_to_pairs, model_forward, param_items
from .ndops import Tape, backward

STRATEGIES = ("replace", "skip", "egs", "lr")


@dataclass(frozen=True)
class OptimizerConfig:
    lr_peak: float = 4e-4
    lr_min: float = 4e-5
    warmup_steps: int = 0
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.lr_min > self.lr_peak:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_peak {self.lr_peak}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive, weight_decay non-negative")


@dataclass(frozen=True)
class SpikeConfig:
    window: int = 50
    sigma_mult: float = 4.0
    skip_radius: int = 200
    egs_alpha: float = 0.1
    lr_shrink: float = 0.5
    strategy_order: tuple = STRATEGIES

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.sigma_mult <= 0:
            raise ConfigError("sigma_mult must be positive")
        if self.skip_radius < 0:
            raise ConfigError("skip_radius must be >= 0")
        if not 0 < self.egs_alpha <= 1:
            raise ConfigError(f"egs_alpha must be in (0, 1], got {self.egs_alpha}")
        if not 0 < self.lr_shrink <= 1:
            raise ConfigError("lr_shrink must be in (0, 1]")
        seen = set()
        for s in self.strategy_order:
            if s not in STRATEGIES or s in seen:
                raise ConfigError(f"strategy_order must be an ordered subset of {STRATEGIES}")
            seen.add(s)


@dataclass
class Batch:
    tokens: np.ndarray  # (rows, seq_len) int64
    source_index: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[1] < 2:
            raise ValueError(f"batch needs shape (rows, seq>=2), got {self.tokens.shape}")


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0            # optimizer steps taken
    cursor: int = 0          # next train-stream batch index
    loss_history: list[float] = field(default_factory=list)
    skip_set: set[int] = field(default_factory=set)
    lr_scale: float = 1.0
    egs_active: bool = False
    reserve_used: int = 0
    diverged: bool = False


class SpikeVerdict:
    """Truthy iff a spike fired; carries a numeric-divergence flag."""

    __slots__ = ("fired", "diverged")

    def __init__(self, fired, diverged: bool = False):
        self.fired = bool(fired)
        self.diverged = bool(diverged)

    def __bool__(self) -> bool:
        return self.fired

    def __repr__(self) -> str:
        return f"SpikeVerdict(fired={self.fired}, diverged={self.diverged})"


def init_train_state(params: ModelParams) -> TrainState:
    m = {name: np.zeros_like(t.data) for name, t in param_items(params)}
    v = {name: np.zeros_like(t.data) for name, t in param_items(params)}
    return TrainState(params=params, m=m, v=v)


def cosine_lr(step: int, opt: OptimizerConfig, lr_scale: float = 1.0) -> float:
    """Linear warmup to the (possibly shrunk) peak, cosine decay to the floor."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    peak = max(opt.lr_min, opt.lr_peak * lr_scale)
    if step < opt.warmup_steps:
        return peak * step / opt.warmup_steps
    if step == opt.warmup_steps:
        return peak
    if step >= opt.total_steps:
        return opt.lr_min
    progress = (step - opt.warmup_steps) / (opt.total_steps - opt.warmup_steps)
    return opt.lr_min + 0.5 * (peak - opt.lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(state: TrainState, grads: dict, lr: float, opt: OptimizerConfig) -> None:
    """One decoupled-weight-decay Adam update; decay precedes the moment step."""
    t = state.step + 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in param_items(state.params):
        if name not in state.m:
            raise StateError(f"optimizer state missing moments for {name}")
        g = grads.get(p)
        g = np.zeros_like(p.data) if g is None else g.data
        if g.shape != p.data.shape:
            raise StateError(f"gradient for {name} has shape {g.shape}, param {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        new = p.data * p.data.dtype.type(1.0 - lr * opt.weight_decay)
        new = new - (lr / bc1) * m / (np.sqrt(v / bc2) + opt.eps)
        _assign_param(state.params, name, ndops.parameter(new, dtype=p.data.dtype))
    state.step = t


def _assign_param(params: ModelParams, name: str, tensor) -> None:
    if "." in name:
        layer, fname = name.split(".")
        setattr(params.layers[int(layer.removeprefix("layer"))], fname, tensor)
    else:
        setattr(params, name, tensor)


def egs_scale(grads: dict, params: ModelParams, alpha: float) -> dict:
    """Scale the token-embedding gradient by alpha; everything else untouched.

    alpha == 1 returns the input map unchanged (bitwise no-op).
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"egs alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return grads
    out = dict(grads)
    g = grads.get(params.embed)
    if g is not None:
        out[params.embed] = ndops.Tensor(g.data * g.data.dtype.type(alpha), dtype=g.data.dtype)
    return out


def detect_spike(loss_history: list[float], new_loss: float, spike: SpikeConfig) -> SpikeVerdict:
    """Fires when the new loss exceeds mean + sigma_mult * std of a full window.

    A non-finite loss fires unconditionally and flags divergence.
    """
    if not math.isfinite(new_loss):
        return SpikeVerdict(True, diverged=True)
    if len(loss_history) < spike.window:
        return SpikeVerdict(False)
    w = np.asarray(loss_history[-spike.window:], dtype=np.float64)
    return SpikeVerdict(new_loss > w.mean() + spike.sigma_mult * w.std())


def mitigate_spike(state: TrainState, spike_step: int, spike: SpikeConfig,
                   reserve: list[Batch]) -> tuple[Batch | None, list[str]]:
    """Apply every configured strategy in order; returns (replacement, actions).

    replace pops the reserve queue (exhaustion logs a warning and falls
    through); skip marks the radius around the spike; egs arms the embedding
    gradient shrink for subsequent steps; lr tightens the schedule peak.
    """
    replacement = None
    actions = []
    for strat in spike.strategy_order:
        if strat == "replace":
            if state.reserve_used < len(reserve):
                replacement = reserve[state.reserve_used]
                state.reserve_used += 1
                actions.append(f"replace:{replacement.source_index}")
            else:
                actions.append("replace-exhausted")
        elif strat == "skip":
            lo = max(0, spike_step - spike.skip_radius)
            hi = spike_step + spike.skip_radius
            state.skip_set.update(range(lo, hi + 1))
            actions.append(f"skip:{lo}-{hi}")
        elif strat == "egs":
            state.egs_active = True
            actions.append(f"egs:{spike.egs_alpha}")
        elif strat == "lr":
            state.lr_scale *= spike.lr_shrink
            actions.append(f"lr:{state.lr_scale:g}")
    return replacement, actions


def batch_loss(params: ModelParams, cfg: ModelConfig, batch: Batch):
    """Mean next-token cross-entropy over every predicted position."""
    rows = []
    for r in range(batch.tokens.shape[0]):
        row = batch.tokens[r]
        logits = model_forward(params, cfg, row[:-1])
        rows.append(ndops.cross_entropy(logits, row[1:]))
    total = rows[0]
    for part in rows[1:]:
        total = ndops.add(total, part)
    return ndops.mul(total, 1.0 / len(rows))


def make_batches(ids, batch_size: int, seq_len: int, seed: int = 0,
                 limit: int | None = None) -> list[Batch]:
    """Non-overlapping (seq_len + 1)-token windows, shuffled, grouped in rows."""
    ids = np.asarray(ids, dtype=np.int64)
    win = seq_len + 1
    n_windows = ids.size // win
    if n_windows < batch_size:
        raise ValueError(f"corpus of {ids.size} tokens yields {n_windows} windows; "
                         f"need at least {batch_size}")
    windows = ids[:n_windows * win].reshape(n_windows, win)
    order = np.random.default_rng(seed).permutation(n_windows)
    out = []
    for b in range(n_windows // batch_size):
        rows = windows[order[b * batch_size:(b + 1) * batch_size]]
        out.append(Batch(tokens=rows, source_index=b))
        if limit is not None and len(out) >= limit:
            break
    return out


def poison_batch(batch: Batch, seed: int = 0) -> Batch:
    """Shuffle each row independently: same tokens, destroyed continuations."""
    rng = np.random.default_rng(seed)
    rows = batch.tokens.copy()
    for r in range(rows.shape[0]):
        rng.shuffle(rows[r])
    return Batch(tokens=rows, source_index=batch.source_index)


@dataclass
class CurveRow:
    step: int        # iteration index in the data order
    loss: float
    lr: float
    action: str      # "|"-joined mitigation actions, empty when none


@dataclass
class TrainResult:
    state: TrainState
    curve: list[CurveRow]
    actions: list[str]   # full log incl. skipped iterations and divergence
    stopped_early: bool


def reserve_split(batches: list[Batch]) -> tuple[list[Batch], list[Batch]]:
    """Hold out the final 1% (at least one batch) as the replacement reserve."""
    if len(batches) < 2:
        raise ValueError("need at least 2 batches (1 train + 1 reserve)")
    k = max(1, len(batches) // 100)
    return batches[:-k], batches[-k:]


def render_curve(curve: list[CurveRow]) -> str:
    lines = ["step,loss,lr,action"]
    for row in curve:
        lines.append(f"{row.step},{row.loss!r},{row.lr!r},{row.action}")
    return "\n".join(lines) + "\n"


def train_loop(state: TrainState, model_cfg: ModelConfig, opt: OptimizerConfig,
               spike: SpikeConfig, batches: list[Batch], steps: int,
               out_dir=None, checkpoint_every: int = 0) -> TrainResult:
    """Run up to `steps` optimizer steps over the pre-shuffled batch stream.

    Resumable: pass a state restored by load_train_checkpoint together with
    the same batch list and configs to continue bit-identically.
    """
    stream, reserve = reserve_split(batches)
    curve: list[CurveRow] = []
    log: list[str] = []
    target = state.step + steps
    stopped_early = False

    while state.step < target:
        if state.cursor >= len(stream):
            log.append(f"stream-exhausted:{state.cursor}")
            stopped_early = True
            break
        batch = stream[state.cursor]
        iteration = state.cursor
        if batch.source_index in state.skip_set:
            log.append(f"skipped:{iteration}")
            state.cursor += 1
            continue

        egs_armed = state.egs_active  # armed by a *previous* iteration only
        with Tape() as tape:
            loss_t = batch_loss(state.params, model_cfg, batch)
        loss = loss_t.item()
        actions: list[str] = []
        verdict = detect_spike(state.loss_history, loss, spike)
        if verdict:
            replacement, actions = mitigate_spike(state, iteration, spike, reserve)
            if verdict.diverged:
                actions.append("divergence")
            if replacement is not None:
                tape.nodes.clear()
                with Tape() as tape:
                    loss_t = batch_loss(state.params, model_cfg, replacement)
                loss = loss_t.item()

        if not math.isfinite(loss):
            state.diverged = True
            tape.nodes.clear()
            log.append(f"divergence:{iteration}|" + "|".join(actions))
            state.cursor += 1
            continue

        grads = backward(tape, loss_t)
        if egs_armed:
            grads = egs_scale(grads, state.params, spike.egs_alpha)
        lr = cosine_lr(state.step, opt, state.lr_scale)
        adamw_step(state, grads, lr, opt)

        state.loss_history.append(loss)
        if len(state.loss_history) > spike.window:
            del state.loss_history[:-spike.window]
        curve.append(CurveRow(step=iteration, loss=loss, lr=lr, action="|".join(actions)))
        if actions:
            log.append(f"mitigated:{iteration}|" + "|".join(actions))
        state.cursor += 1

        if out_dir and checkpoint_every and state.step % checkpoint_every == 0:
            save_train_checkpoint(os.path.join(out_dir, f"ckpt-{state.step}.ckpt"),
                                  state, model_cfg, opt, spike)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_train_checkpoint(os.path.join(out_dir, "ckpt-final.ckpt"),
                              state, model_cfg, opt, spike)
        with open(os.path.join(out_dir, "loss_curve.csv"), "w", encoding="utf-8") as f:
            f.write(render_curve(curve))
    return TrainResult(state=state, curve=curve, actions=log, stopped_early=stopped_early)


# --- training checkpoints ----------------------------------------------------

def _encode_ranges(values: set[int]) -> str:
    if not values:
        return ""
    xs = sorted(values)
    spans = []
    lo = prev = xs[0]
    for x in xs[1:]:
        if x == prev + 1:
            prev = x
            continue
        spans.append((lo, prev))
        lo = prev = x
    spans.append((lo, prev))
    return ";".join(f"{a}-{b}" for a, b in spans)


def _decode_ranges(text: str) -> set[int]:
    out: set[int] = set()
    if not text:
        return out
    for span in text.split(";"):
        a, b = span.split("-")
        out.update(range(int(a), int(b) + 1))
    return out


def save_train_checkpoint(path, state: TrainState, model_cfg: ModelConfig,
                          opt: OptimizerConfig, spike: SpikeConfig) -> None:
    """Model checkpoint container plus optimizer moments and loop scalars."""
    import tempfile

    pairs = config_to_pairs(model_cfg)
    for k in ("lr_peak", "lr_min", "beta1", "beta2", "eps", "weight_decay"):
        pairs[f"opt.{k}"] = repr(getattr(opt, k))
    for k in ("warmup_steps", "total_steps"):
        pairs[f"opt.{k}"] = str(getattr(opt, k))
    pairs["spike.window"] = str(spike.window)
    pairs["spike.sigma_mult"] = repr(spike.sigma_mult)
    pairs["spike.skip_radius"] = str(spike.skip_radius)
    pairs["spike.egs_alpha"] = repr(spike.egs_alpha)
    pairs["spike.lr_shrink"] = repr(spike.lr_shrink)
    pairs["spike.strategy_order"] = ",".join(spike.strategy_order)
    pairs["train.step"] = str(state.step)
    pairs["train.cursor"] = str(state.cursor)
    pairs["train.lr_scale"] = repr(state.lr_scale)
    pairs["train.egs_active"] = str(state.egs_active).lower()
    pairs["train.reserve_used"] = str(state.reserve_used)
    pairs["train.diverged"] = str(state.diverged).lower()
    pairs["train.skip_set"] = _encode_ranges(state.skip_set)
    pairs["train.loss_history"] = ",".join(repr(x) for x in state.loss_history)

    cfg_block = format_config(pairs).encode("ascii")
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(b"config %d\n" % len(cfg_block))
            f.write(cfg_block)
            for name, t in param_items(state.params):
                _write_tensor(f, name, t.data)
            for name, _ in param_items(state.params):
                _write_tensor(f, f"opt.m.{name}", state.m[name])
            for name, _ in param_items(state.params):
                _write_tensor(f, f"opt.v.{name}", state.v[name])
            f.write(b"end\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    dims = " ".join(str(d) for d in arr.shape)
    f.write(f"tensor {name} {dims}\n".encode("ascii"))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_train_checkpoint(path) -> tuple[TrainState, ModelConfig, OptimizerConfig, SpikeConfig]:
    from .checkpoint import _read_line
    from .model import LayerParams

    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        head = _read_line(f).split()
        if len(head) != 2 or head[0] != "config":
            raise ValueError(f"{path}: malformed config header")
        pairs = parse_config(f.read(int(head[1])).decode("ascii"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            parts = _read_line(f).split()
            if parts == ["end"]:
                break
            if not parts or parts[0] != "tensor":
                raise ValueError(f"{path}: malformed tensor header {parts!r}")
            name = parts[1]
            shape = tuple(int(x) for x in parts[2:])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    model_cfg = config_from_pairs(pairs)
    opt = OptimizerConfig(
        lr_peak=get_float(pairs, "opt.lr_peak"), lr_min=get_float(pairs, "opt.lr_min"),
        warmup_steps=get_int(pairs, "opt.warmup_steps"),
        total_steps=get_int(pairs, "opt.total_steps"),
        beta1=get_float(pairs, "opt.beta1"), beta2=get_float(pairs, "opt.beta2"),
        eps=get_float(pairs, "opt.eps"), weight_decay=get_float(pairs, "opt.weight_decay"))
    spike = SpikeConfig(
        window=get_int(pairs, "spike.window"),
        sigma_mult=get_float(pairs, "spike.sigma_mult"),
        skip_radius=get_int(pairs, "spike.skip_radius"),
        egs_alpha=get_float(pairs, "spike.egs_alpha"),
        lr_shrink=get_float(pairs, "spike.lr_shrink"),
        strategy_order=tuple(get_str(pairs, "spike.strategy_order").split(",")))

    h, ff, kv, v = (model_cfg.hidden_size, model_cfg.ffn_size, model_cfg.kv_dim,
                    model_cfg.vocab_size)
    shapes = {"embed": (v, h), "final_norm": (h,), "unembed": (h, v)}
    for i in range(model_cfg.n_layers):
        shapes.update({f"layer{i}.wq": (h, h), f"layer{i}.wk": (h, kv),
                       f"layer{i}.wv": (h, kv), f"layer{i}.wo": (h, h),
                       f"layer{i}.norm_attn": (h,), f"layer{i}.w_gate": (h, ff),
                       f"layer{i}.w_up": (h, ff), f"layer{i}.w_down": (ff, h),
                       f"layer{i}.norm_ffn": (h,)})

    def take(name):
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shapes[name.removeprefix("opt.m.").removeprefix("opt.v.")]:
            raise StateError(f"{path}: tensor {name} has shape {arr.shape}")
        return arr

    params = ModelParams(
        embed=ndops.parameter(take("embed"), dtype=np.float32),
        layers=[LayerParams(**{fn: ndops.parameter(take(f"layer{i}.{fn}"), dtype=np.float32)
                               for fn in ("wq", "wk", "wv", "wo", "norm_attn",
                                          "w_gate", "w_up", "w_down", "norm_ffn")})
                for i in range(model_cfg.n_layers)],
        final_norm=ndops.parameter(take("final_norm"), dtype=np.float32),
        unembed=ndops.parameter(take("unembed"), dtype=np.float32))
    m = {name: take(f"opt.m.{name}") for name, _ in param_items(params)}
    vv = {name: take(f"opt.v.{name}") for name, _ in param_items(params)}
    if tensors:
        raise ValueError(f"{path}: unexpected tensors {sorted(tensors)}")

    hist_text = get_str(pairs, "train.loss_history", "")
    state = TrainState(
        params=params, m=m, v=vv,
        step=get_int(pairs, "train.step"),
        cursor=get_int(pairs, "train.cursor"),
        loss_history=[float(x) for x in hist_text.split(",") if x],
        skip_set=_decode_ranges(get_str(pairs, "train.skip_set", "")),
        lr_scale=get_float(pairs, "train.lr_scale"),
        egs_active=get_bool(pairs, "train.egs_active"),
        reserve_used=get_int(pairs, "train.reserve_used"),
        diverged=get_bool(pairs, "train.diverged"))
    return state, model_cfg, opt, spike
