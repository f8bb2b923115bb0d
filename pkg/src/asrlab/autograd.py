"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy buffers. Every differentiable operation records
its inputs and a backward closure; ``backward`` on a scalar loss walks the
recorded graph once, in reverse topological order, and then consumes it.
A consumed graph rejects a second backward instead of silently accumulating.

Broadcasting: ``add``/``mul``/``sub`` follow numpy broadcasting (gradients
are summed back to the input shapes); all other ops require the exact
shapes documented on each function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation."""


class GraphConsumedError(RuntimeError):
    """backward was called on a graph that has already been consumed."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values in input")


class Tensor:
    """Dense float64 tensor participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def constant(data) -> Tensor:
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_finite("add", a.data)
    _require_finite("add", b.data)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_finite("sub", a.data)
    _require_finite("sub", b.data)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_finite("mul", a.data)
    _require_finite("mul", b.data)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    _require_finite("scale", a.data)
    f = float(factor)
    return _node(a.data * f, (a,), lambda g: (g * f,))


def shift(a: Tensor, offset: float) -> Tensor:
    _require_finite("shift", a.data)
    return _node(a.data + float(offset), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    _require_finite("matmul", a.data)
    _require_finite("matmul", b.data)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _node(data, (a,), lambda g: (g.reshape(old),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ndim = a.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"slice_axis: axis {axis} out of range for shape {a.shape}")
    axis = axis % ndim
    dim = a.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of bounds for dim {dim}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(ndim))

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    for t in tensors:
        _require_finite("concat", t.data)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), backward)


def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    _require_finite("sum", a.data)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _node(data, (a,), backward)


def mean_(a: Tensor) -> Tensor:
    return scale(sum_(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def sigmoid(a: Tensor) -> Tensor:
    _require_finite("sigmoid", a.data)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    _require_finite("swish", a.data)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _node(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split in half along ``axis``, first half gated by
    the sigmoid of the second."""
    dim = a.shape[axis]
    if dim % 2 != 0:
        raise ShapeError(f"glu: axis dim {dim} is odd")
    half = dim // 2
    left = slice_axis(a, axis, 0, half)
    right = slice_axis(a, axis, half, dim)
    return mul(left, sigmoid(right))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite("log_softmax", a.data)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    s = np.exp(data)

    def backward(g: np.ndarray):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    _require_finite("logsumexp", a.data)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    total = e.sum(axis=axis, keepdims=True)
    data_k = m + np.log(total)
    soft = e / total
    data = data_k if keepdims else np.squeeze(data_k, axis=axis)

    def backward(g: np.ndarray):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (soft * ge,)

    return _node(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learned per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    _require_finite("layer_norm", x.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def backward(g: np.ndarray):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return _node(data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolutions


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution with same padding.

    ``x``: (B, T, C); ``weight``: (K, C) with odd K; ``bias``: (C,).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: input must be (B, T, C), got {x.shape}")
    k, c = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    if c != x.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: channels {x.shape[-1]} vs kernel {c}")
    if bias.shape != (c,):
        raise ShapeError(f"depthwise_conv1d: bias must be ({c},), got {bias.shape}")
    _require_finite("depthwise_conv1d", x.data)
    b, t, _ = x.shape
    pad = k // 2
    xp = np.zeros((b, t + 2 * pad, c))
    xp[:, pad : pad + t, :] = x.data
    out = np.zeros((b, t, c))
    for j in range(k):
        out += xp[:, j : j + t, :] * weight.data[j]
    out += bias.data

    def backward(g: np.ndarray):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for j in range(k):
            dxp[:, j : j + t, :] += g * weight.data[j]
            dw[j] = (g * xp[:, j : j + t, :]).sum(axis=(0, 1))
        db = g.sum(axis=(0, 1))
        return dxp[:, pad : pad + t, :], dw, db

    return _node(out, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """Standard 2-D convolution. ``x``: (B, Cin, H, W); ``weight``:
    (Cout, Cin, kH, kW); ``bias``: (Cout,)."""
    if stride < 1:
        raise ShapeError(f"conv2d: stride {stride} must be >= 1")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.shape}/{weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} vs weight {cin_w}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must be ({cout},), got {bias.shape}")
    _require_finite("conv2d", x.data)
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}")
    xp = np.zeros((b, cin, hp, wp))
    xp[:, :, padding : padding + h, padding : padding + w] = x.data
    out = np.zeros((b, cout, ho, wo))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
            out += np.einsum("bchw,oc->bohw", patch, weight.data[:, :, u, v])
    out += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
                dw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, patch)
                dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += np.einsum(
                    "bohw,oc->bchw", g, weight.data[:, :, u, v]
                )
        db = g.sum(axis=(0, 2, 3))
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dw, db

    return _node(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# indexing / masking / regularization


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ``weight``: (V, D); ``ids``: integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding: id out of range [0, {v})")
    data = weight.data[ids]

    def backward(g: np.ndarray):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids, g)
        return (dw,)

    return _node(data, (weight,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis (numpy ``take`` semantics)."""
    indices = np.asarray(indices)
    dim = a.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= dim):
        raise ShapeError(f"take: index out of range [0, {dim})")
    data = np.take(a.data, indices, axis=axis)

    def backward(g: np.ndarray):
        da = np.zeros_like(a.data)
        # scatter-add back along the gathered axis
        moved = np.moveaxis(da, axis, 0)
        gm = np.moveaxis(g, axis, 0) if indices.ndim == 1 else g
        np.add.at(moved, indices, gm)
        return (da,)

    return _node(data, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, float(value), a.data)
    return _node(data, (a,), lambda g: (np.where(mask, 0.0, g),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; exact identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    data = np.where(keep, a.data * factor, 0.0)
    return _node(data, (a,), lambda g: (np.where(keep, g * factor, 0.0),))


def rel_shift(a: Tensor) -> Tensor:
    """Align relative-position scores: input (..., T, 2T-1) with column
    T-1+j-i holding the score of query i attending at offset j-i; output
    (..., T, T) with out[..., i, j] = a[..., i, T-1+j-i]."""
    t = a.shape[-2]
    if a.shape[-1] != 2 * t - 1:
        raise ShapeError(f"rel_shift: expected last dim {2 * t - 1}, got {a.shape[-1]}")
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    cols = t - 1 + j - i
    data = np.take_along_axis(a.data, np.broadcast_to(cols, a.shape[:-1] + (t,)), axis=-1)

    def backward(g: np.ndarray):
        da = np.zeros_like(a.data)
        flat = da.reshape(-1, t, 2 * t - 1)
        gf = g.reshape(-1, t, t)
        for b in range(flat.shape[0]):
            np.add.at(flat[b], (i, cols), gf[b])
        return (da,)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# kernel dispatch (uniform entry point over the op set)

OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_axis,
    "concat": concat,
    "sum": sum_,
    "mean": mean_,
    "sigmoid": sigmoid,
    "swish": swish,
    "glu": glu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "layer_norm": layer_norm,
    "depthwise_conv1d": depthwise_conv1d,
    "conv2d": conv2d,
    "dropout": dropout,
    "embedding": embedding,
    "take": take,
    "masked_fill": masked_fill,
    "rel_shift": rel_shift,
}


def apply_op(kind: str, *args, **attrs) -> Tensor:
    """Uniform dispatcher over the supported op kinds."""
    if kind not in OP_TABLE:
        raise ValueError(f"unknown op kind: {kind!r}")
    return OP_TABLE[kind](*args, **attrs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from a
    scalar loss, then consume the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward: graph already consumed")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node._consumed = True
        if g is None or not node.requires_grad:
            continue
        if node._backward_fn is None:
            # leaf: accumulate into the persistent grad buffer
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg.copy() if pg.base is not None else pg
        node._backward_fn = None
        node._parents = ()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class FdReport:
    max_rel_error: float
    passed: bool


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> FdReport:
    """Compare the analytic gradient of a tensor→scalar function against
    central differences, coordinate by coordinate."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")

    def evaluate(values: np.ndarray) -> float:
        t = Tensor(values, requires_grad=True)
        out = f(t)
        if out.data.size != 1:
            raise ShapeError("finite_difference_check: f must return a scalar")
        return out.item()

    base = x.data.copy()
    if evaluate(base) != evaluate(base):
        raise ValueError("finite_difference_check: f is not deterministic")

    leaf = Tensor(base, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = evaluate(base)
        flat[i] = orig - epsilon
        lo = evaluate(base)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return FdReport(max_rel_error=max_rel, passed=max_rel <= tolerance)


def finite_difference_spot_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    tensors: dict[str, Tensor],
    coords: Sequence[tuple[str, int]],
    epsilon: float = 1e-5,
    tolerance: float = 1e-3,
) -> FdReport:
    """Finite-difference check restricted to selected (tensor, flat index)
    coordinates of a multi-tensor function; used for whole-model checks."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")

    def evaluate() -> float:
        fresh = {k: Tensor(t.data, requires_grad=False) for k, t in tensors.items()}
        out = f(fresh)
        if out.data.size != 1:
            raise ShapeError("finite_difference_spot_check: f must return a scalar")
        return out.item()

    if evaluate() != evaluate():
        raise ValueError("finite_difference_spot_check: f is not deterministic")

    leaves = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in tensors.items()}
    backward(f(leaves))

    max_rel = 0.0
    for name, idx in coords:
        buf = tensors[name].data.reshape(-1)
        orig = buf[idx]
        buf[idx] = orig + epsilon
        hi = evaluate()
        buf[idx] = orig - epsilon
        lo = evaluate()
        buf[idx] = orig
        numeric = (hi - lo) / (2.0 * epsilon)
        grad = leaves[name].grad
        analytic = 0.0 if grad is None else float(grad.reshape(-1)[idx])
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        max_rel = max(max_rel, rel)
    return FdReport(max_rel_error=max_rel, passed=max_rel <= tolerance)
