"""Decoder-only transformer with grouped-query attention.

The block is: rotary-embedded grouped-query attention, then a SwiGLU feed
forward, each wrapped in a residual connection and RMS normalization. The
norm sits after the residual add by default ("post"); "pre" moves it onto
the sublayer input. Embedding and output projection are separate tensors.
No projection carries a bias.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndops
from .configio import get_float, get_int, get_str
from .errors import ConfigError, LengthError, VocabularyError
from .ndops import Tensor

FFN_ROUND = 256


def ffn_size_for(hidden_size: int) -> int:
    """Smallest multiple of 256 at or above 8/3 of the hidden size."""
    raw = 8 * hidden_size / 3
    return int(math.ceil(raw / FFN_ROUND)) * FFN_ROUND


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int
    ffn_size: int
    n_heads: int
    n_layers: int
    kv_groups: int
    max_seq_len: int
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    norm_placement: str = "post"
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "ffn_size", "n_heads", "n_layers",
                     "kv_groups", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.kv_groups != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by kv_groups {self.kv_groups}")
        if self.norm_placement not in ("post", "pre"):
            raise ConfigError(f"norm_placement must be 'post' or 'pre', got {self.norm_placement!r}")
        if self.norm_eps <= 0 or self.rope_base <= 0 or self.init_std <= 0:
            raise ConfigError("norm_eps, rope_base, and init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_groups * self.head_dim

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The 1.3B configuration this codebase is sized around."""
        return cls(vocab_size=64896, hidden_size=2048, ffn_size=5632, n_heads=16,
                   n_layers=24, kv_groups=4, max_seq_len=4096)

    @classmethod
    def tiny(cls, vocab_size: int = 64, hidden_size: int = 16, n_heads: int = 4,
             n_layers: int = 2, kv_groups: int = 2, max_seq_len: int = 32,
             **kw) -> "ModelConfig":
        """Small instance for tests; same shape rules as full scale."""
        return cls(vocab_size=vocab_size, hidden_size=hidden_size,
                   ffn_size=kw.pop("ffn_size", ffn_size_for(hidden_size)),
                   n_heads=n_heads, n_layers=n_layers, kv_groups=kv_groups,
                   max_seq_len=max_seq_len, **kw)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    h, f = cfg.hidden_size, cfg.ffn_size
    attn = h * h + 2 * h * cfg.kv_dim + h * h
    ffn = 3 * h * f
    per_layer = attn + ffn + 2 * h
    return 2 * cfg.vocab_size * h + cfg.n_layers * per_layer + h


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_attn: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm_ffn: Tensor


@dataclass
class ModelParams:
    embed: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    unembed: Tensor


def param_items(params: ModelParams):
    """(name, tensor) pairs in declaration order; the canonical ordering for
    checkpoints and optimizer state."""
    yield "embed", params.embed
    for i, lp in enumerate(params.layers):
        for fname in ("wq", "wk", "wv", "wo", "norm_attn", "w_gate", "w_up", "w_down", "norm_ffn"):
            yield f"layer{i}.{fname}", getattr(lp, fname)
    yield "final_norm", params.final_norm
    yield "unembed", params.unembed


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters: normal(0, init_std) matrices, unit norm scales.

    Draw order follows param_items so a seed pins every tensor.
    """
    rng = np.random.default_rng(seed)
    std = cfg.init_std

    def mat(rows, cols):
        return ndops.parameter(rng.normal(0.0, std, size=(rows, cols)), dtype=dtype)

    def ones(n):
        return ndops.parameter(np.ones(n), dtype=dtype)

    h, f, kv = cfg.hidden_size, cfg.ffn_size, cfg.kv_dim
    embed = mat(cfg.vocab_size, h)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerParams(
            wq=mat(h, h), wk=mat(h, kv), wv=mat(h, kv), wo=mat(h, h),
            norm_attn=ones(h),
            w_gate=mat(h, f), w_up=mat(h, f), w_down=mat(f, h),
            norm_ffn=ones(h),
        ))
    return ModelParams(embed=embed, layers=layers, final_norm=ones(h), unembed=mat(h, cfg.vocab_size))


def rmsnorm(x: Tensor, scale: Tensor, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis, then learned scale."""
    return ndops.mul(ndops.rsqrt_normalize(x, eps), scale)


def swiglu_ffn(x: Tensor, layer: LayerParams) -> Tensor:
    """(silu(x W_gate) * (x W_up)) W_down."""
    gate = ndops.silu(ndops.matmul(x, layer.w_gate))
    up = ndops.matmul(x, layer.w_up)
    return ndops.matmul(ndops.mul(gate, up), layer.w_down)


def gqa_attention(x: Tensor, layer: LayerParams, cfg: ModelConfig,
                  positions=None, mask: Tensor | None = None) -> Tensor:
    """Causal grouped-query attention over a full sequence.

    Query head h attends through key/value group h // (n_heads // kv_groups);
    with kv_groups == n_heads this is ordinary multi-head attention. Rotary
    position terms are applied to each query and key head before scoring.
    """
    seq = x.shape[0]
    hd = cfg.head_dim
    if positions is None:
        positions = np.arange(seq)
    if mask is None:
        mask = ndops.causal_mask(seq, dtype=x.dtype)

    q_all = ndops.matmul(x, layer.wq)
    k_all = ndops.matmul(x, layer.wk)
    v_all = ndops.matmul(x, layer.wv)

    k_heads = []
    v_heads = []
    for g in range(cfg.kv_groups):
        kg = ndops.slice_cols(k_all, g * hd, (g + 1) * hd)
        k_heads.append(ndops.rope_rotate(kg, positions, cfg.rope_base))
        v_heads.append(ndops.slice_cols(v_all, g * hd, (g + 1) * hd))

    heads_per_group = cfg.n_heads // cfg.kv_groups
    scale = 1.0 / math.sqrt(hd)
    ctx = []
    for h in range(cfg.n_heads):
        g = h // heads_per_group
        qh = ndops.rope_rotate(ndops.slice_cols(q_all, h * hd, (h + 1) * hd),
                               positions, cfg.rope_base)
        scores = ndops.mul(ndops.matmul(qh, ndops.transpose2(k_heads[g])), scale)
        scores = ndops.add(scores, mask)
        attn = ndops.softmax(scores, axis=-1)
        ctx.append(ndops.matmul(attn, v_heads[g]))
    return ndops.matmul(ndops.concat_cols(ctx), layer.wo)


def block_forward(x: Tensor, layer: LayerParams, cfg: ModelConfig,
                  positions=None, mask: Tensor | None = None) -> Tensor:
    """One transformer block with the configured norm placement."""
    if cfg.norm_placement == "post":
        h = rmsnorm(ndops.add(x, gqa_attention(x, layer, cfg, positions, mask)),
                    layer.norm_attn, cfg.norm_eps)
        return rmsnorm(ndops.add(h, swiglu_ffn(h, layer)), layer.norm_ffn, cfg.norm_eps)
    h = ndops.add(x, gqa_attention(rmsnorm(x, layer.norm_attn, cfg.norm_eps),
                                   layer, cfg, positions, mask))
    return ndops.add(h, swiglu_ffn(rmsnorm(h, layer.norm_ffn, cfg.norm_eps), layer))


def check_token_ids(token_ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"token ids must be a flat sequence, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids[(ids < 0) | (ids >= vocab_size)][0])
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids


def model_forward(params: ModelParams, cfg: ModelConfig, token_ids) -> Tensor:
    """Logits for every position of a token sequence, shape (len, vocab)."""
    ids = check_token_ids(token_ids, cfg.vocab_size)
    if ids.size > cfg.max_seq_len:
        raise LengthError(f"sequence length {ids.size} exceeds maximum {cfg.max_seq_len}")
    if ids.size == 0:
        return Tensor(np.zeros((0, cfg.vocab_size)), dtype=params.embed.dtype)
    x = ndops.embedding_gather(params.embed, ids)
    positions = np.arange(ids.size)
    mask = ndops.causal_mask(ids.size, dtype=x.dtype)
    for layer in params.layers:
        x = block_forward(x, layer, cfg, positions, mask)
    x = rmsnorm(x, params.final_norm, cfg.norm_eps)
    return ndops.matmul(x, params.unembed)


# --- config round-trip (used by checkpoints and the command line) ----------

_CONFIG_KEYS = ("vocab_size", "hidden_size", "ffn_size", "n_heads", "n_layers",
                "kv_groups", "max_seq_len", "norm_eps", "rope_base",
                "norm_placement", "init_std")


def config_to_pairs(cfg: ModelConfig) -> dict[str, str]:
    out = {}
    for k in _CONFIG_KEYS:
        v = getattr(cfg, k)
        out[k] = repr(v) if isinstance(v, float) else str(v)
    return out


def config_from_pairs(pairs: dict) -> ModelConfig:
    hidden = get_int(pairs, "hidden_size")
    return ModelConfig(
        vocab_size=get_int(pairs, "vocab_size"),
        hidden_size=hidden,
        ffn_size=get_int(pairs, "ffn_size", ffn_size_for(hidden)),
        n_heads=get_int(pairs, "n_heads"),
        n_layers=get_int(pairs, "n_layers"),
        kv_groups=get_int(pairs, "kv_groups"),
        max_seq_len=get_int(pairs, "max_seq_len"),
        norm_eps=get_float(pairs, "norm_eps", 1e-5),
        rope_base=get_float(pairs, "rope_base", 10000.0),
        norm_placement=get_str(pairs, "norm_placement", "post"),
        init_std=get_float(pairs, "init_std", 0.02),
    )
