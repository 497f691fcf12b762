"""Model checkpoint container.

Layout: an ASCII magic line with a format version, a length-prefixed
key=value block holding the model configuration, then each tensor as a
header line `tensor <name> <d0> <d1> ...` followed by raw float32
little-endian row-major bytes, in the canonical parameter order, and a
final `end` line. Round-trips float32 parameters bit for bit.
"""

import os
import tempfile

import numpy as np

from . import ndops
from .configio import format_config, parse_config
from .model import LayerParams, ModelConfig, ModelParams, config_from_pairs, config_to_pairs, param_items

MAGIC = b"desklm-checkpoint v1\n"


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig) -> None:
    """Write params + config to `path` atomically (temp file then rename)."""
    cfg_block = format_config(config_to_pairs(cfg)).encode("ascii")
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(b"config %d\n" % len(cfg_block))
            f.write(cfg_block)
            for name, t in param_items(params):
                dims = " ".join(str(d) for d in t.shape)
                f.write(f"tensor {name} {dims}\n".encode("ascii"))
                f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
            f.write(b"end\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_line(f) -> str:
    raw = f.readline()
    if not raw.endswith(b"\n"):
        raise ValueError("checkpoint truncated")
    return raw[:-1].decode("ascii")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint; validates magic, names, shapes, and completeness."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        head = _read_line(f).split()
        if len(head) != 2 or head[0] != "config":
            raise ValueError(f"{path}: malformed config header")
        cfg = config_from_pairs(parse_config(f.read(int(head[1])).decode("ascii")))

        tensors: dict[str, ndops.Tensor] = {}
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
                raise ValueError(f"{path}: checkpoint truncated in tensor {name}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            tensors[name] = ndops.parameter(arr, dtype=np.float32)

    def take(name, shape):
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        t = tensors.pop(name)
        if t.shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {t.shape}, expected {shape}")
        return t

    h, ff, kv, v = cfg.hidden_size, cfg.ffn_size, cfg.kv_dim, cfg.vocab_size
    embed = take("embed", (v, h))
    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        layers.append(LayerParams(
            wq=take(p + "wq", (h, h)), wk=take(p + "wk", (h, kv)),
            wv=take(p + "wv", (h, kv)), wo=take(p + "wo", (h, h)),
            norm_attn=take(p + "norm_attn", (h,)),
            w_gate=take(p + "w_gate", (h, ff)), w_up=take(p + "w_up", (h, ff)),
            w_down=take(p + "w_down", (ff, h)),
            norm_ffn=take(p + "norm_ffn", (h,)),
        ))
    final_norm = take("final_norm", (h,))
    unembed = take("unembed", (h, v))
    if tensors:
        raise ValueError(f"{path}: unexpected tensors {sorted(tensors)}")
    return ModelParams(embed=embed, layers=layers, final_norm=final_norm,
                       unembed=unembed), cfg
