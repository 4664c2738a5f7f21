"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every operation applied to its tensors in creation
order, which is already a topological order, so the backward pass is a single
reversed sweep.  Graphs are cheap and meant to be rebuilt for every
evaluation.

Example::

    g = Graph()
    x = g.leaf(np.array([-1.0, 2.0]))
    y = g.mean(g.relu(x))
    grads = g.backward(y)        # {x: array([0. , 0.5])}
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "conv2d", "add", "relu", "clip_upper", "mean_pool", "flatten",
    "affine_norm", "softmax_ce", "mse", "scalar_combine",
    # reductions and the margin head used by the max-margin objectives
    "sum", "mean", "margin",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node in a :class:`Graph`; ``data`` is a float64 ndarray."""

    __slots__ = ("data", "graph", "requires_grad", "index")

    def __init__(self, data: np.ndarray, graph: "Graph", requires_grad: bool, index: int):
        self.data = data
        self.graph = graph
        self.requires_grad = requires_grad
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_f64(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind}: non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, H, W) -> (N * Ho * Wo, kh * kw * C), patch entries ordered (i, j, c)
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    xt = x.transpose(0, 2, 3, 1)
    cols = np.concatenate([xt[:, i:i + ho, j:j + wo, :] for i in range(kh) for j in range(kw)], axis=3)
    return cols.reshape(-1, cols.shape[3])


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv2d_forward(x: np.ndarray, w: np.ndarray, padding: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation, ``(N, C, H, W) * (O, C, kh, kw) -> (N, O, Ho, Wo)``."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    out = _cols(x, kh, kw) @ _kernel_matrix(w)
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Op table: forward(arrays, params) -> (out, ctx); backward(g, arrays, out, ctx, params, needs)
# returns one gradient (or None) per input; ``needs[i]`` is False for inputs nobody differentiates.
# ---------------------------------------------------------------------------

def _matmul_fwd(a, p):
    x, w = a
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")
    return x @ w, None


def _matmul_bwd(g, a, out, ctx, p, needs):
    x, w = a
    return [g @ w.T if needs[0] else None, x.T @ g if needs[1] else None]


def _conv_fwd(a, p):
    x, w = a
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes input {x.shape}, kernel {w.shape}")
    pad = p.get("padding", 0)
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    return conv2d_forward(x, w, pad), None


def _conv_bwd(g, a, out, ctx, p, needs):
    x, w = a
    pad = p.get("padding", 0)
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = gx = None
    if needs[1]:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        gw = (_cols(xp, kh, kw).T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    if needs[0]:
        gcols = (g2 @ _kernel_matrix(w).T).reshape(n, ho, wo, kh, kw, c)
        gxt = np.zeros((n, ho + kh - 1, wo + kw - 1, c))
        for i in range(kh):
            for j in range(kw):
                gxt[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        gx = gxt.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        gx = np.ascontiguousarray(gx)
    return [gx, gw]


def _add_fwd(a, p):
    x, y = a
    try:
        out = x + y
    except ValueError:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} do not broadcast") from None
    return out, None


def _add_bwd(g, a, out, ctx, p, needs):
    return [_unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape)]


def _relu_fwd(a, p):
    return np.maximum(a[0], 0.0), None


def _relu_bwd(g, a, out, ctx, p, needs):
    return [g * (a[0] > 0)]


def _channel_view(z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # one bound per feature (2-D activations) or per channel (4-D activations)
    if h.ndim == 2:
        expected = (h.shape[1],)
        view = z.reshape(1, -1)
    elif h.ndim == 4:
        expected = (h.shape[1],)
        view = z.reshape(1, -1, 1, 1)
    else:
        raise ShapeError(f"clip_upper: unsupported activation shape {h.shape}")
    if z.shape != expected:
        raise ShapeError(f"clip_upper: bound shape {z.shape} does not match activation {h.shape}")
    return view


def _clip_fwd(a, p):
    h, z = a
    zv = _channel_view(z, h)
    passed = h <= zv  # tie h == z counts as unclipped
    return np.where(passed, h, zv), passed


def _clip_bwd(g, a, out, ctx, p, needs):
    h, z = a
    passed = ctx
    gh = g * passed if needs[0] else None
    gz = None
    if needs[1]:
        axes = (0,) if h.ndim == 2 else (0, 2, 3)
        gz = np.where(passed, 0.0, g).sum(axis=axes)
    return [gh, gz]


def _pool_fwd(a, p):
    x = a[0]
    s = p["size"]
    if x.ndim != 4 or x.shape[2] % s or x.shape[3] % s:
        raise ShapeError(f"mean_pool: size {s} does not tile input {x.shape}")
    n, c, h, w = x.shape
    return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5)), None


def _pool_bwd(g, a, out, ctx, p, needs):
    s = p["size"]
    gx = np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)
    return [gx]


def _flatten_fwd(a, p):
    x = a[0]
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g, a, out, ctx, p, needs):
    return [g.reshape(a[0].shape)]


def _affine_fwd(a, p):
    x, scale, shift = a
    c = x.shape[1] if x.ndim >= 2 else -1
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine_norm: scale {scale.shape}/shift {shift.shape} vs input {x.shape}")
    view = (1, c) + (1,) * (x.ndim - 2)
    return x * scale.reshape(view) + shift.reshape(view), view


def _affine_bwd(g, a, out, ctx, p, needs):
    x, scale, shift = a
    view = ctx
    axes = tuple(i for i in range(x.ndim) if i != 1)
    return [g * scale.reshape(view) if needs[0] else None,
            (g * x).sum(axis=axes) if needs[1] else None,
            g.sum(axis=axes) if needs[2] else None]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _ce_fwd(a, p):
    logits = a[0]
    y = np.asarray(p["labels"], dtype=np.intp)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_ce: logits {logits.shape} vs labels {y.shape}")
    logp = _log_softmax(logits)
    return _as_f64(-logp[np.arange(len(y)), y].mean()), logp


def _ce_bwd(g, a, out, ctx, p, needs):
    y = np.asarray(p["labels"], dtype=np.intp)
    prob = np.exp(ctx)
    prob[np.arange(len(y)), y] -= 1.0
    return [g * prob / len(y)]


def _mse_fwd(a, p):
    x, y = a
    if x.shape != y.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {y.shape} differ")
    d = x - y
    return _as_f64(np.mean(d * d)), d


def _mse_bwd(g, a, out, ctx, p, needs):
    gd = g * 2.0 * ctx / ctx.size
    return [gd, -gd]


def _combine_fwd(a, p):
    coefs = p["coefs"]
    if len(coefs) != len(a) or any(x.shape != () for x in a):
        raise ShapeError("scalar_combine: needs one coefficient per scalar input")
    return _as_f64(sum(c * x for c, x in zip(coefs, a))), None


def _combine_bwd(g, a, out, ctx, p, needs):
    return [g * c for c in p["coefs"]]


def _sum_fwd(a, p):
    return _as_f64(a[0].sum()), None


def _sum_bwd(g, a, out, ctx, p, needs):
    return [np.broadcast_to(g, a[0].shape).copy()]


def _mean_fwd(a, p):
    return _as_f64(a[0].mean()), None


def _mean_bwd(g, a, out, ctx, p, needs):
    return [np.full(a[0].shape, g / a[0].size)]


def _margin_fwd(a, p):
    logits = a[0]
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"margin: needs (N, K>=2) logits, got {logits.shape}")
    n = logits.shape[0]
    c = np.broadcast_to(np.asarray(p["classes"], dtype=np.intp), (n,))
    rows = np.arange(n)
    others = logits.copy()
    others[rows, c] = -np.inf
    k = others.argmax(axis=1)  # subgradient: the current runner-up index
    return logits[rows, c] - logits[rows, k], (c, k)


def _margin_bwd(g, a, out, ctx, p, needs):
    c, k = ctx
    rows = np.arange(a[0].shape[0])
    gl = np.zeros_like(a[0])
    gl[rows, c] += g
    gl[rows, k] -= g
    return [gl]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "add": (_add_fwd, _add_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "clip_upper": (_clip_fwd, _clip_bwd),
    "mean_pool": (_pool_fwd, _pool_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
    "affine_norm": (_affine_fwd, _affine_bwd),
    "softmax_ce": (_ce_fwd, _ce_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "scalar_combine": (_combine_fwd, _combine_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "margin": (_margin_fwd, _margin_bwd),
}


class Graph:
    """Records operations for one evaluation and differentiates through them."""

    def __init__(self):
        # (kind, input indices, params, ctx) per node; leaves carry kind None
        self.nodes: list[tuple] = []
        self.tensors: list[Tensor] = []

    def _push(self, data, requires_grad, record) -> Tensor:
        t = Tensor(data, self, requires_grad, len(self.tensors))
        self.tensors.append(t)
        self.nodes.append(record)
        return t

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        arr = _as_f64(value)
        _check_finite("leaf", arr)
        return self._push(arr, requires_grad, (None, (), None, None))

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def apply(self, kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
        if kind not in _OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{kind}: input belongs to another graph")
        # inputs are leaves or earlier outputs, both already checked
        arrays = [t.data for t in inputs]
        # overflow surfaces as NonFiniteError below, so numpy's warning is redundant
        with np.errstate(over="ignore", invalid="ignore"):
            out, ctx = _OPS[kind][0](arrays, params)
        _check_finite(kind, out)
        rg = any(t.requires_grad for t in inputs)
        return self._push(out, rg, (kind, tuple(t.index for t in inputs), params, ctx))

    # convenience wrappers, one per op kind
    def matmul(self, x, w):
        return self.apply("matmul", [x, w])

    def conv2d(self, x, w, padding=0):
        return self.apply("conv2d", [x, w], padding=padding)

    def add(self, x, y):
        return self.apply("add", [x, y])

    def relu(self, x):
        return self.apply("relu", [x])

    def clip_upper(self, h, z):
        return self.apply("clip_upper", [h, z])

    def mean_pool(self, x, size):
        return self.apply("mean_pool", [x], size=size)

    def flatten(self, x):
        return self.apply("flatten", [x])

    def affine_norm(self, x, scale, shift):
        return self.apply("affine_norm", [x, scale, shift])

    def softmax_ce(self, logits, labels):
        return self.apply("softmax_ce", [logits], labels=np.asarray(labels))

    def mse(self, x, y):
        return self.apply("mse", [x, y])

    def scalar_combine(self, scalars, coefs):
        return self.apply("scalar_combine", list(scalars), coefs=tuple(float(c) for c in coefs))

    def sum(self, x):
        return self.apply("sum", [x])

    def mean(self, x):
        return self.apply("mean", [x])

    def margin(self, logits, classes):
        return self.apply("margin", [logits], classes=classes)

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of the scalar ``output`` with respect to every differentiable leaf."""
        if output.graph is not self:
            raise ValueError("backward: output belongs to another graph")
        if output.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        grads: list = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.data)
        for i in range(output.index, -1, -1):
            g = grads[i]
            kind, inputs, params, ctx = self.nodes[i]
            if g is None or kind is None:
                continue
            arrays = [self.tensors[j].data for j in inputs]
            needs = [self.tensors[j].requires_grad for j in inputs]
            in_grads = _OPS[kind][1](g, arrays, self.tensors[i].data, ctx, params, needs)
            for j, gj in zip(inputs, in_grads):
                if gj is None or not self.tensors[j].requires_grad:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for t in self.tensors[: output.index + 1]:
            if self.nodes[t.index][0] is None and t.requires_grad:
                g = grads[t.index]
                out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        for g in out.values():
            _check_finite("backward", g)
        return out


def finite_difference(fn: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_f64(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
