"""KV-cached CPU inference: prefill, single-token decode, sampling, benchmark.

This path never records gradients. Attention runs per key/value group with
that group's query heads stacked into one matmul, so fewer groups means
fewer, larger kernel calls and a proportionally smaller cache: the grouped
layout holds kv_groups/n_heads of the multi-head cache bytes.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import LengthError
from .model import ModelConfig, ModelParams, check_token_ids
from .ndops import _MASK_NEG, rope_angles


@dataclass
class KVCache:
    """Preallocated per-layer key/value slabs plus a fill cursor."""

    k: list[np.ndarray]  # each (kv_groups, max_seq_len, head_dim)
    v: list[np.ndarray]
    used: int
    max_seq_len: int

    def reset(self):
        self.used = 0


def make_cache(cfg: ModelConfig, dtype=np.float32) -> KVCache:
    shape = (cfg.kv_groups, cfg.max_seq_len, cfg.head_dim)
    return KVCache(k=[np.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)],
                   v=[np.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)],
                   used=0, max_seq_len=cfg.max_seq_len)


def cache_bytes(cfg: ModelConfig, used: int, itemsize: int = 4) -> int:
    """Bytes of key+value actually holding data after `used` positions."""
    return cfg.n_layers * 2 * cfg.kv_groups * used * cfg.head_dim * itemsize


# --- untraced forward kernels ----------------------------------------------

def _rmsnorm_np(x: np.ndarray, scale: np.ndarray, eps: float) -> np.ndarray:
    ms = (x * x).mean(axis=-1, keepdims=True) + x.dtype.type(eps)
    return x * (ms ** -0.5) * scale


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope_np(mat: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    cos, sin = rope_angles(positions, mat.shape[-1], base, mat.dtype)
    if mat.ndim == 3:  # (seq, heads, head_dim): angles broadcast over heads
        cos, sin = cos[:, None, :], sin[:, None, :]
    x0 = mat[..., 0::2]
    x1 = mat[..., 1::2]
    out = np.empty_like(mat)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _ffn_np(x: np.ndarray, lp) -> np.ndarray:
    return (_silu_np(x @ lp.w_gate.data) * (x @ lp.w_up.data)) @ lp.w_down.data


def _attend_cached(x: np.ndarray, lp, cfg: ModelConfig, cache: KVCache,
                   layer_idx: int, positions: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Project q/k/v for `x`, append k/v to the cache, attend over the total.

    Queries are processed one kv group at a time with the group's heads
    stacked along the row axis, so each group costs one scores matmul and
    one context matmul regardless of how many heads share it.
    """
    t = x.shape[0]
    hd = cfg.head_dim
    hpg = cfg.n_heads // cfg.kv_groups
    start = cache.used
    total = start + t

    q = (x @ lp.wq.data).reshape(t, cfg.n_heads, hd)
    k_new = (x @ lp.wk.data).reshape(t, cfg.kv_groups, hd)
    v_new = (x @ lp.wv.data).reshape(t, cfg.kv_groups, hd)
    q = _rope_np(q, positions, cfg.rope_base)
    k_new = _rope_np(k_new, positions, cfg.rope_base)

    ck, cv = cache.k[layer_idx], cache.v[layer_idx]
    for g in range(cfg.kv_groups):
        ck[g, start:total] = k_new[:, g]
        cv[g, start:total] = v_new[:, g]

    scale = x.dtype.type(1.0 / math.sqrt(hd))
    rep_mask = np.repeat(mask, hpg, axis=0)
    ctx = np.empty((t, cfg.hidden_size), dtype=x.dtype)
    gw = hpg * hd
    for g in range(cfg.kv_groups):
        qg = q[:, g * hpg:(g + 1) * hpg].reshape(t * hpg, hd)
        scores = (qg @ ck[g, :total].T) * scale + rep_mask
        ctx[:, g * gw:(g + 1) * gw] = (_softmax_rows(scores) @ cv[g, :total]).reshape(t, gw)
    return ctx @ lp.wo.data


def _forward_cached(params: ModelParams, cfg: ModelConfig, cache: KVCache,
                    ids: np.ndarray) -> np.ndarray:
    t = ids.size
    start = cache.used
    positions = np.arange(start, start + t)
    # row i of the new block may see the cached prefix plus new rows <= i
    col = np.arange(start + t)
    allow = col[None, :] <= (start + np.arange(t))[:, None]
    mask = np.where(allow, 0.0, _MASK_NEG).astype(params.embed.dtype)

    x = params.embed.data[ids]
    for li, lp in enumerate(params.layers):
        if cfg.norm_placement == "post":
            h = _rmsnorm_np(x + _attend_cached(x, lp, cfg, cache, li, positions, mask),
                            lp.norm_attn.data, cfg.norm_eps)
            x = _rmsnorm_np(h + _ffn_np(h, lp), lp.norm_ffn.data, cfg.norm_eps)
        else:
            h = x + _attend_cached(_rmsnorm_np(x, lp.norm_attn.data, cfg.norm_eps),
                                   lp, cfg, cache, li, positions, mask)
            x = h + _ffn_np(_rmsnorm_np(h, lp.norm_ffn.data, cfg.norm_eps), lp)
    cache.used += t
    x = _rmsnorm_np(x, params.final_norm.data, cfg.norm_eps)
    return x @ params.unembed.data


def prefill(params: ModelParams, cfg: ModelConfig, cache: KVCache, ids) -> np.ndarray:
    """Run the prompt through the model, filling the cache; logits per row."""
    arr = check_token_ids(ids, cfg.vocab_size)
    if cache.used + arr.size > cache.max_seq_len:
        raise LengthError(
            f"prefill of {arr.size} tokens overflows cache ({cache.used}/{cache.max_seq_len} used)")
    if arr.size == 0:
        return np.zeros((0, cfg.vocab_size), dtype=params.embed.dtype)
    return _forward_cached(params, cfg, cache, arr)


def decode_step(params: ModelParams, cfg: ModelConfig, cache: KVCache,
                token_id: int) -> np.ndarray:
    """Advance one token; returns the next-token logit row, shape (vocab,)."""
    if cache.used >= cache.max_seq_len:
        raise LengthError(f"cache full at {cache.max_seq_len} positions")
    arr = check_token_ids([token_id], cfg.vocab_size)
    return _forward_cached(params, cfg, cache, arr)[0]


# --- sampling ----------------------------------------------------------------

@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0  # 0 keeps the whole distribution
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")


def sample_token(logits: np.ndarray, scfg: SamplerConfig, rng: np.random.Generator) -> int:
    """One token id from a logit row; temperature 0 is greedy argmax."""
    if scfg.temperature == 0.0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / scfg.temperature
    if scfg.top_k and scfg.top_k < z.size:
        keep = np.argsort(-z, kind="stable")[:scfg.top_k]
        filtered = np.full_like(z, -np.inf)
        filtered[keep] = z[keep]
        z = filtered
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def generate(params: ModelParams, cfg: ModelConfig, prompt_ids, max_new_tokens: int,
             scfg: SamplerConfig, eos_id: int | None = None) -> list[int]:
    """Sample a continuation of the prompt; stops at eos or a full cache.

    Returns only the newly generated ids (eos, when hit, is included).
    """
    prompt = list(prompt_ids)
    if not prompt:
        raise ValueError("generate requires a non-empty prompt")
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    cache = make_cache(cfg, dtype=params.embed.dtype)
    logits = prefill(params, cfg, cache, prompt)[-1]
    rng = np.random.default_rng(scfg.seed)
    out: list[int] = []
    for _ in range(max_new_tokens):
        tok = sample_token(logits, scfg, rng)
        out.append(tok)
        if eos_id is not None and tok == eos_id:
            break
        if cache.used >= cache.max_seq_len:
            break
        logits = decode_step(params, cfg, cache, tok)
    return out


# --- throughput benchmark ----------------------------------------------------

@dataclass
class BenchReport:
    hidden_size: int
    n_heads: int
    kv_groups: int
    n_layers: int
    prompt_len: int
    decode_steps: int
    prefill_seconds: float
    decode_seconds: float
    tokens_per_second: float
    cache_bytes_used: int

    def render(self) -> str:
        lines = [
            f"hidden_size={self.hidden_size}",
            f"n_heads={self.n_heads}",
            f"kv_groups={self.kv_groups}",
            f"n_layers={self.n_layers}",
            f"prompt_len={self.prompt_len}",
            f"decode_steps={self.decode_steps}",
            f"prefill_seconds={self.prefill_seconds:.6f}",
            f"decode_seconds={self.decode_seconds:.6f}",
            f"tokens_per_second={self.tokens_per_second:.3f}",
            f"cache_bytes_used={self.cache_bytes_used}",
        ]
        return "\n".join(lines) + "\n"


def benchmark_throughput(params: ModelParams, cfg: ModelConfig, prompt_len: int = 16,
                         decode_steps: int = 64, repeats: int = 3,
                         seed: int = 0) -> BenchReport:
    """Greedy decode timing: median over `repeats` runs of `decode_steps`."""
    if prompt_len < 1 or prompt_len + decode_steps > cfg.max_seq_len:
        raise ValueError("prompt_len + decode_steps must fit within max_seq_len")
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab_size, size=prompt_len)

    prefill_times = []
    decode_times = []
    final_used = 0
    for _ in range(max(1, repeats)):
        cache = make_cache(cfg, dtype=params.embed.dtype)
        t0 = time.perf_counter()
        logits = prefill(params, cfg, cache, prompt)[-1]
        t1 = time.perf_counter()
        tok = int(np.argmax(logits))
        for _ in range(decode_steps):
            logits = decode_step(params, cfg, cache, tok)
            tok = int(np.argmax(logits))
        t2 = time.perf_counter()
        prefill_times.append(t1 - t0)
        decode_times.append(t2 - t1)
        final_used = cache.used

    dec = float(np.median(decode_times))
    return BenchReport(
        hidden_size=cfg.hidden_size, n_heads=cfg.n_heads, kv_groups=cfg.kv_groups,
        n_layers=cfg.n_layers, prompt_len=prompt_len, decode_steps=decode_steps,
        prefill_seconds=float(np.median(prefill_times)), decode_seconds=dec,
        tokens_per_second=decode_steps / dec if dec > 0 else float("inf"),
        cache_bytes_used=cache_bytes(cfg, final_used,
                                     itemsize=params.embed.data.dtype.itemsize),
    )
