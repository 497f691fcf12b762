"""Model architecture: shape oracles, attention reference, gradient checks."""

import dataclasses

import numpy as np
import pytest

from desklm import ndops
from desklm.checkpoint import load_checkpoint, save_checkpoint
from desklm.errors import ConfigError, LengthError, VocabularyError
from desklm.model import (ModelConfig, ffn_size_for, gqa_attention, init_params,
                          model_forward, param_count, param_items, rmsnorm)
from desklm.ndops import Tape, Tensor, backward


def actual_param_count(params) -> int:
    return sum(t.size for _, t in param_items(params))


# --- sizing -----------------------------------------------------------------

def test_ffn_sizing_rule():
    assert ffn_size_for(2048) == 5632
    assert ffn_size_for(16) == 256
    assert ffn_size_for(96) == 256   # 8/3 * 96 = 256 exactly
    assert ffn_size_for(97) == 512   # crosses the multiple, rounds up


def test_full_scale_config_row():
    cfg = ModelConfig.full_scale()
    assert (cfg.vocab_size, cfg.hidden_size, cfg.ffn_size) == (64896, 2048, 5632)
    assert (cfg.n_heads, cfg.n_layers, cfg.kv_groups, cfg.max_seq_len) == (16, 24, 4, 4096)
    assert cfg.ffn_size == ffn_size_for(cfg.hidden_size)
    assert cfg.head_dim == 128 and cfg.kv_dim == 512


def test_full_scale_param_count_closed_form():
    assert param_count(ModelConfig.full_scale()) == 1_348_044_800


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_param_count_matches_instantiated_tensors(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([2, 4]))
    groups = int(rng.choice([g for g in (1, 2, heads) if heads % g == 0]))
    cfg = ModelConfig.tiny(vocab_size=int(rng.integers(16, 40)),
                           hidden_size=8 * heads, n_heads=heads,
                           n_layers=int(rng.integers(1, 4)), kv_groups=groups)
    params = init_params(cfg, seed=seed)
    assert actual_param_count(params) == param_count(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig.tiny(hidden_size=18, n_heads=4)  # not divisible
    with pytest.raises(ConfigError):
        ModelConfig.tiny(n_heads=4, kv_groups=3)
    with pytest.raises(ConfigError):
        ModelConfig.tiny(norm_placement="mid")
    with pytest.raises(ConfigError):
        ModelConfig.tiny(n_layers=0)


# --- initialization ---------------------------------------------------------

def test_init_statistics_and_norm_scales():
    cfg = ModelConfig.tiny(vocab_size=512, hidden_size=64, n_heads=4, kv_groups=2)
    params = init_params(cfg, seed=0)
    e = params.embed.data
    assert abs(e.std() - cfg.init_std) / cfg.init_std < 0.10
    assert abs(e.mean()) < 5 * cfg.init_std / np.sqrt(e.size)
    for lp in params.layers:
        assert np.array_equal(lp.norm_attn.data, np.ones(cfg.hidden_size, dtype=np.float32))
        assert np.array_equal(lp.norm_ffn.data, np.ones(cfg.hidden_size, dtype=np.float32))
    assert np.array_equal(params.final_norm.data, np.ones(cfg.hidden_size, dtype=np.float32))


def test_init_is_seed_deterministic_and_untied():
    cfg = ModelConfig.tiny()
    a = init_params(cfg, seed=7)
    b = init_params(cfg, seed=7)
    c = init_params(cfg, seed=8)
    for (_, ta), (_, tb) in zip(param_items(a), param_items(b)):
        assert np.array_equal(ta.data, tb.data)
    assert not np.array_equal(a.embed.data, c.embed.data)
    # untied: embedding and output projection are distinct storage
    assert a.embed.data is not a.unembed.data
    assert not np.array_equal(a.embed.data, a.unembed.data.T)


def test_every_parameter_is_flagged_trainable():
    params = init_params(ModelConfig.tiny(), seed=0)
    assert all(t.is_param for _, t in param_items(params))


# --- attention oracle -------------------------------------------------------

def rope_ref(mat: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    out = mat.copy()
    d = mat.shape[1]
    for i in range(d // 2):
        ang = positions.astype(np.float64) * base ** (-2.0 * i / d)
        c, s = np.cos(ang), np.sin(ang)
        a, b = mat[:, 2 * i].copy(), mat[:, 2 * i + 1].copy()
        out[:, 2 * i] = a * c - b * s
        out[:, 2 * i + 1] = a * s + b * c
    return out


def attention_ref(x: np.ndarray, lp, cfg: ModelConfig, positions: np.ndarray) -> np.ndarray:
    """Per-head double loop; causal by construction (no additive mask)."""
    hd = cfg.head_dim
    hpg = cfg.n_heads // cfg.kv_groups
    q, k, v = x @ lp.wq.data, x @ lp.wk.data, x @ lp.wv.data
    seq = x.shape[0]
    ctx = np.zeros((seq, cfg.hidden_size), dtype=x.dtype)
    for h in range(cfg.n_heads):
        g = h // hpg
        qh = rope_ref(q[:, h * hd:(h + 1) * hd], positions, cfg.rope_base)
        kg = rope_ref(k[:, g * hd:(g + 1) * hd], positions, cfg.rope_base)
        vg = v[:, g * hd:(g + 1) * hd]
        for i in range(seq):
            scores = np.array([qh[i] @ kg[j] / np.sqrt(hd) for j in range(i + 1)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            ctx[i, h * hd:(h + 1) * hd] = sum(w[j] * vg[j] for j in range(i + 1))
    return ctx @ lp.wo.data


@pytest.mark.parametrize("kv_groups", [1, 2, 4])
def test_gqa_matches_reference_per_group_count(kv_groups):
    cfg = ModelConfig.tiny(hidden_size=16, n_heads=4, kv_groups=kv_groups, n_layers=1)
    params = init_params(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, cfg.hidden_size))
    pos = np.arange(6)
    got = gqa_attention(Tensor(x, dtype=np.float64), params.layers[0], cfg, pos)
    want = attention_ref(x, params.layers[0], cfg, pos)
    np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-12)


def test_gqa_with_groups_equal_heads_is_mha():
    # kv_groups == n_heads assigns every query head its own kv head
    cfg = ModelConfig.tiny(hidden_size=16, n_heads=4, kv_groups=4, n_layers=1)
    assert cfg.kv_dim == cfg.hidden_size
    params = init_params(cfg, seed=1, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(5, 16))
    got = gqa_attention(Tensor(x, dtype=np.float64), params.layers[0], cfg, np.arange(5))
    want = attention_ref(x, params.layers[0], cfg, np.arange(5))
    np.testing.assert_allclose(got.data, want, rtol=1e-9, atol=1e-12)


def test_attention_scores_depend_on_relative_offset_only():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(1, 16))
    k = rng.normal(size=(1, 16))
    base = 10000.0

    def score(m, n):
        qr = ndops.rope_rotate(Tensor(q, dtype=np.float64), [m], base).data
        kr = ndops.rope_rotate(Tensor(k, dtype=np.float64), [n], base).data
        return float((qr @ kr.T)[0, 0])

    for m, n, d in [(5, 2, 100), (17, 17, 31), (40, 3, 7)]:
        assert abs(score(m, n) - score(m + d, n + d)) < 1e-9


# --- full forward -----------------------------------------------------------

def test_forward_shapes_and_empty_input():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, seed=0)
    logits = model_forward(params, cfg, [1, 2, 3, 4, 5])
    assert logits.shape == (5, cfg.vocab_size)
    empty = model_forward(params, cfg, [])
    assert empty.shape == (0, cfg.vocab_size)


def test_forward_rejects_bad_inputs():
    cfg = ModelConfig.tiny(max_seq_len=8)
    params = init_params(cfg, seed=0)
    with pytest.raises(LengthError):
        model_forward(params, cfg, [0] * 9)
    with pytest.raises(VocabularyError):
        model_forward(params, cfg, [0, cfg.vocab_size])
    with pytest.raises(VocabularyError):
        model_forward(params, cfg, [-1])


def test_forward_is_causal_bitwise():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, seed=4)
    a = model_forward(params, cfg, [3, 1, 4, 1, 5, 9]).data
    b = model_forward(params, cfg, [3, 1, 4, 2, 6, 8]).data
    assert np.array_equal(a[:3], b[:3])        # shared prefix, identical logits
    assert not np.array_equal(a[3:], b[3:])    # suffix did change


def test_norm_placements_differ_but_both_run():
    base = dict(vocab_size=64, hidden_size=16, n_heads=4, n_layers=2, kv_groups=2,
                max_seq_len=32)
    post = ModelConfig(ffn_size=ffn_size_for(16), norm_placement="post", **base)
    pre = ModelConfig(ffn_size=ffn_size_for(16), norm_placement="pre", **base)
    p_post = init_params(post, seed=0)
    p_pre = init_params(pre, seed=0)
    ids = [1, 2, 3]
    a = model_forward(p_post, post, ids).data
    b = model_forward(p_pre, pre, ids).data
    assert a.shape == b.shape
    assert not np.allclose(a, b)


def test_rmsnorm_rows_have_unit_rms():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 12)) * 3.0
    scale = Tensor(np.ones(12), dtype=np.float64)
    y = rmsnorm(Tensor(x, dtype=np.float64), scale, 1e-12).data
    rms = np.sqrt((y * y).mean(axis=-1))
    np.testing.assert_allclose(rms, 1.0, rtol=1e-9)


# --- end-to-end gradient check ----------------------------------------------

def replace_tensor(params, name: str, arr: np.ndarray):
    new = dataclasses.replace(params)
    new.layers = [dataclasses.replace(lp) for lp in params.layers]
    t = ndops.parameter(arr, dtype=np.float64)
    if "." in name:
        layer, field = name.split(".")
        idx = int(layer.removeprefix("layer"))
        setattr(new.layers[idx], field, t)
    else:
        setattr(new, name, t)
    return new


def test_model_gradients_match_finite_differences():
    cfg = ModelConfig.tiny(vocab_size=32, hidden_size=16, n_heads=4, n_layers=2,
                           kv_groups=2, max_seq_len=16)
    params = init_params(cfg, seed=12, dtype=np.float64)
    ids = [5, 11, 2, 30, 7, 19]
    tgt = [11, 2, 30, 7, 19, 3]

    def loss_value(p) -> float:
        return ndops.cross_entropy(model_forward(p, cfg, ids), tgt).item()

    with Tape() as tape:
        loss = ndops.cross_entropy(model_forward(params, cfg, ids), tgt)
    grads = backward(tape, loss)
    by_name = {name: t for name, t in param_items(params)}

    rng = np.random.default_rng(0)
    h = 1e-5
    checked = 0
    for name in ["embed", "layer0.wq", "layer0.wk", "layer0.norm_attn",
                 "layer1.w_gate", "layer1.w_down", "final_norm", "unembed"]:
        t = by_name[name]
        g = grads[t].data
        flat = t.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            bumped = flat.copy()
            bumped[j] += h
            up = loss_value(replace_tensor(params, name, bumped.reshape(t.shape)))
            bumped[j] -= 2 * h
            dn = loss_value(replace_tensor(params, name, bumped.reshape(t.shape)))
            num = (up - dn) / (2 * h)
            ana = g.reshape(-1)[j]
            assert abs(ana - num) / max(abs(num), 1e-5) < 1e-3, \
                f"{name}[{j}]: analytic {ana:.6e} vs numeric {num:.6e}"
            checked += 1
    assert checked >= 40


# --- checkpoint round-trip --------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = ModelConfig.tiny(vocab_size=48, hidden_size=16, n_heads=4, kv_groups=2)
    params = init_params(cfg, seed=21)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, cfg)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    for (na, ta), (nb, tb) in zip(param_items(params), param_items(loaded)):
        assert na == nb
        assert ta.data.dtype == np.float32 and tb.data.dtype == np.float32
        assert np.array_equal(ta.data, tb.data), na
    assert all(t.is_param for _, t in param_items(loaded))


def test_checkpoint_serialization_is_deterministic(tmp_path):
    cfg = ModelConfig.tiny()
    params = init_params(cfg, seed=3)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, cfg)
    loaded, _ = load_checkpoint(p1)
    save_checkpoint(p2, loaded, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    cfg = ModelConfig.tiny()
    params = init_params(cfg, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg)
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"X" + blob[1:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ValueError):
        load_checkpoint(trunc)
