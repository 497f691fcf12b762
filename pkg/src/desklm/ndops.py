"""Dense-array numerics with reverse-mode automatic differentiation.

Tensors are immutable row-major float arrays (float32 by default, float64
for gradient verification). Operations execute eagerly in numpy; when a
Tape is active they are also recorded so `backward` can produce gradients
for every parameter tensor reachable from a scalar loss.
"""

import math

import numpy as np

from .errors import NumericError, ShapeError, TracingError

DEFAULT_DTYPE = np.float32

_MASK_NEG = -1e30  # additive mask value; exp() underflows to exactly 0


class Tensor:
    """Immutable dense array: shape plus a contiguous row-major buffer."""

    __slots__ = ("data", "is_param")

    def __init__(self, data, dtype=None, param: bool = False):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE, order="C")
        if any(n < 0 for n in arr.shape):
            raise ShapeError(f"negative extent in shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.is_param = param

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt an op result without copying. Caller hands over ownership.
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.is_param = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, param={self.is_param})"


def parameter(data, dtype=None) -> Tensor:
    """A tensor flagged as trainable: backward reports its gradient."""
    return Tensor(data, dtype=dtype, param=True)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_TAPE_STACK: list = []


class Tape:
    """Ordered record of primitive ops; single-owner, one backward per trace."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class notrace:
    """Context manager that suspends recording, e.g. for frozen-model passes."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _record(inputs, output, vjp):
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(inputs, output, vjp))
    return output


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a traced scalar loss w.r.t. every reachable parameter.

    The tape is consumed: its node list is cleared on return.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    produced = any(node.output is loss for node in tape.nodes)
    if not produced:
        raise TracingError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype).reshape(loss.shape)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.vjp(g_out)):
            if g_in is None or not isinstance(inp, Tensor):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
                by_id[key] = inp
    tape.nodes.clear()
    return {t: Tensor._wrap(np.asarray(grads[k], dtype=t.dtype)) for k, t in by_id.items() if t.is_param}


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Reduce a gradient back to `shape` after numpy broadcasting of (n,) or scalar.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    # Permitted: identical shapes, a scalar side, or a trailing (n,) against (..., n).
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == 1 and big and big[-1] == small[0]:
        return
    raise ShapeError(f"{opname}: shapes {sa} and {sb} do not align")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, vjp)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    out = Tensor._wrap(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, vjp)


def silu(x: Tensor) -> Tensor:
    """z * sigmoid(z), elementwise."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor._wrap(x.data * sig)

    def vjp(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _record((x,), out, vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Normalized exponentials along `axis`, max-subtracted for stability."""
    if axis >= len(x.shape) or axis < -len(x.shape):
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data) | (x.data <= _MASK_NEG)):
        raise NumericError("softmax input contains non-finite values")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record((x,), out, vjp)


def rsqrt_normalize(x: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps); the RMS-normalization core."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + x.dtype.type(eps)
    scale = ms ** -0.5
    out = Tensor._wrap(x.data * scale)
    n = x.shape[-1] if x.shape else 1

    def vjp(g):
        dot = (x.data * g).sum(axis=-1, keepdims=True)
        return (scale * (g - x.data * (scale * scale / n) * dot),)

    return _record((x,), out, vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of `table` selected by integer ids."""
    idx = np.asarray(ids, dtype=np.int64)
    out = Tensor._wrap(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt, None

    return _record((table, None), out, vjp)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer targets under row-wise softmax.

    reduction: "mean" or "sum" over rows.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy expects rank-2 logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if tgt.shape != (n,):
        raise ShapeError(f"targets shape {tgt.shape} does not match {n} logit rows")
    if n == 0:
        raise ValueError("cross_entropy over zero rows")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    nll = -(logits.data[np.arange(n), tgt] - m[:, 0] - np.log(z[:, 0]))
    total = nll.sum()
    out = Tensor._wrap(np.asarray(total / n if reduction == "mean" else total, dtype=logits.dtype))

    def vjp(g):
        gl = p.copy()
        gl[np.arange(n), tgt] -= 1.0
        scale = g / n if reduction == "mean" else g
        return gl * scale, None

    return _record((logits, None), out, vjp)


def rope_rotate(x: Tensor, positions, base: float) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) of each row by position * base^(-2i/d).

    x is (seq, head_dim) with head_dim even; angles are generated in float64
    and cast down, so position ids never collide at low precision.
    """
    seq, d = x.shape
    if d % 2 != 0:
        raise ShapeError(f"rope requires an even head dimension, got {d}")
    cos, sin = rope_angles(positions, d, base, x.dtype)
    x0 = x.data[:, 0::2]
    x1 = x.data[:, 1::2]
    y = np.empty_like(x.data)
    y[:, 0::2] = x0 * cos - x1 * sin
    y[:, 1::2] = x0 * sin + x1 * cos
    out = Tensor._wrap(y)

    def vjp(g):
        g0 = g[:, 0::2]
        g1 = g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = g0 * cos + g1 * sin  # rotate back by -angle
        gx[:, 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _record((x,), out, vjp)


def rope_angles(positions, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    pos = np.asarray(positions, dtype=np.float64)
    inv = float(base) ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor._wrap(x.data[start:stop].copy())

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record((x,), out, vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor._wrap(x.data[:, start:stop].copy())

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _record((x,), out, vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols of zero parts")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def vjp(g):
        gs = []
        ofs = 0
        for w in widths:
            gs.append(g[:, ofs:ofs + w])
            ofs += w
        return tuple(gs)

    return _record(tuple(parts), out, vjp)


def transpose2(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose2 expects rank 2, got {x.shape}")
    out = Tensor._wrap(x.data.T.copy())

    def vjp(g):
        return (g.T,)

    return _record((x,), out, vjp)


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("mean over zero elements")
    out = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))

    def vjp(g):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)

    return _record((x,), out, vjp)


def logsigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow on either tail."""
    d = x.data
    y = np.where(d >= 0, -np.log1p(np.exp(-np.abs(d))), d - np.log1p(np.exp(-np.abs(d))))
    out = Tensor._wrap(np.asarray(y, dtype=x.dtype))

    def vjp(g):
        return (g / (1.0 + np.exp(d)),)  # sigmoid(-x)

    return _record((x,), out, vjp)


def causal_mask(seq: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Additive (seq, seq) mask: 0 on and below the diagonal, large-negative above."""
    m = np.triu(np.full((seq, seq), _MASK_NEG, dtype=dtype), k=1)
    return Tensor(m, dtype=dtype)
