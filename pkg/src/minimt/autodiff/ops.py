"""Differentiable primitives on :class:`~minimt.autodiff.tensor.Tensor`.

Broadcasting is deliberately narrow: an elementwise binary op accepts equal
shapes, a scalar on either side, or a trailing row vector ``[d]`` against
``[..., d]``. Anything wider must be made explicit with :func:`repeat_axis`
so every backward rule stays auditable.
"""

from __future__ import annotations

import numpy as np

from minimt.autodiff.tensor import Tensor, make_node
from minimt.errors import ConfigurationError, DimensionError, InvalidMaskError

__all__ = [
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "bmm",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "pad_axis",
    "repeat_axis",
    "tanh",
    "sigmoid",
    "relu",
    "sqrt",
    "reciprocal",
    "elementwise",
    "sum_all",
    "sum_axis",
    "mean_all",
    "softmax_rows",
    "log_softmax_rows",
    "layer_normalize",
    "dropout",
    "gather_columns",
    "take_rows",
    "select_index",
]


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    # trailing row vector against [..., d]
    if a.ndim == 1 and b.ndim > 1 and b.shape[-1] == a.shape[0]:
        return
    if b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(
        f"shapes {a.shape} and {b.shape} are not broadcast-compatible "
        "(only equal shapes, scalars and trailing row vectors are supported)"
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of the allowed broadcasts)."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # row vector case: sum over all leading axes
    axes = tuple(range(grad.ndim - len(shape)))
    out = grad.sum(axis=axes) if axes else grad
    if out.shape != shape:  # size-1 dims kept inside shape
        out = out.reshape(shape)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: ``[B,n,k] @ [B,k,m] -> [B,n,m]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes do not chain: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.swapaxes(1, 2) if a.requires_grad else None
        gb = ad.swapaxes(1, 2) @ g if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(a.data, axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    original = a.data.shape
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(original),))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(parts)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return make_node(out, tuple(parts), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)
    out = a.data[slicer]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[slicer] = g
        return (full,)

    return make_node(out, (a,), bwd)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    a = _as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(before, before + a.data.shape[axis])
    slicer = tuple(slicer)
    return make_node(out, (a,), lambda g: (g[slicer],))


def repeat_axis(a: Tensor, reps: int, axis: int) -> Tensor:
    """Tile a size-1 axis ``reps`` times; the backward rule sums it back."""
    a = _as_tensor(a)
    if a.data.shape[axis] != 1:
        raise DimensionError(
            f"repeat_axis needs extent 1 on axis {axis}, got shape {a.shape}"
        )
    out = np.repeat(a.data, reps, axis=axis)
    return make_node(out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    return make_node(out, (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / a.data
    return make_node(out, (a,), lambda g: (-g * out * out,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: tanh | sigmoid | relu | add | mul."""
    if kind in _UNARY:
        if len(operands) != 1:
            raise DimensionError(f"{kind} takes one operand, got {len(operands)}")
        return _UNARY[kind](*operands)
    if kind in _BINARY:
        if len(operands) != 2:
            raise DimensionError(f"{kind} takes two operands, got {len(operands)}")
        return _BINARY[kind](*operands)
    raise ConfigurationError(f"unknown elementwise kind: {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())
    shape = a.data.shape
    return make_node(out, (a,), lambda g: (np.broadcast_to(g, shape),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape),)

    return make_node(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return mul(sum_all(a), 1.0 / a.size)


def _masked_softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(
                f"mask shape {mask.shape} does not match input shape {x.shape}"
            )
        if not mask.any(axis=-1).all():
            raise InvalidMaskError("softmax mask leaves at least one row fully masked")
        z = np.where(mask, x, -np.inf)
    else:
        z = x
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax over the last axis; masked entries are exactly 0."""
    a = _as_tensor(a)
    out = _masked_softmax(a.data, mask)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return make_node(out, (a,), bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (a,), bwd)


def layer_normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the population (biased) variance and divides by sqrt(var + eps).
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data
    gd = gain.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return make_node(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"dropout mode must be train or infer, got {mode!r}")
    x = _as_tensor(x)
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in train mode needs a seeded generator")
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    factor = keep * scale
    out = x.data * factor
    return make_node(out, (x,), lambda g: (g * factor,))


def gather_columns(e: Tensor, ids: np.ndarray) -> Tensor:
    """Pick columns ``ids`` of a ``[d, V]`` matrix as rows: result ``[len(ids), d]``."""
    e = _as_tensor(e)
    if e.ndim != 2:
        raise DimensionError(f"gather_columns expects a matrix, got shape {e.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("gather_columns expects a flat id sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= e.shape[1]):
        raise IndexError(
            f"id out of range for vocabulary of size {e.shape[1]}"
        )
    out = e.data[:, ids].T
    d, v = e.data.shape

    def bwd(g):
        acc = np.zeros((v, d), dtype=np.float64)
        np.add.at(acc, ids, g)
        return (acc.T,)

    return make_node(out, (e,), bwd)


def take_rows(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick rows ``ids`` of a matrix."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    out = a.data[ids]
    shape = a.data.shape

    def bwd(g):
        acc = np.zeros(shape, dtype=np.float64)
        np.add.at(acc, ids, g)
        return (acc,)

    return make_node(out, (a,), bwd)


def select_index(a: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row element pick: result[i] = a[i, ids[i]]."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    n, v = a.shape
    if ids.shape != (n,):
        raise DimensionError(f"ids shape {ids.shape} does not match rows {n}")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"target id out of range for {v} columns")
    rows = np.arange(n)
    out = a.data[rows, ids]

    def bwd(g):
        acc = np.zeros((n, v), dtype=np.float64)
        acc[rows, ids] = g
        return (acc,)

    return make_node(out, (a,), bwd)
