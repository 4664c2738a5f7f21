"""Maximum-classification-margin estimation and overfitting diagnostics.

The margin of class ``c`` at ``x`` is ``f_c(x) - max_{k != c} f_k(x)`` for the
(optionally clipped) network.  It is maximized over the input box [0, 1]^d by
projected gradient ascent from random starts; tiny inputs can be checked
against an exhaustive grid.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Graph, NonFiniteError
from .network import BoundVectors, Network, bounded_forward, trace


@dataclass(frozen=True)
class AscentConfig:
    steps: int = 50
    step_size: float = 0.1
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts (J_c) must be >= 1")
        if self.steps < 0 or self.step_size <= 0:
            raise ValueError("steps must be >= 0 and step_size positive")


@dataclass(frozen=True)
class MarginEstimate:
    cls: int
    x: np.ndarray
    margin: float
    restart: int
    trace_len: int
    converged: bool = False
    aborted: bool = False


def margins(net: Network, Z: Optional[BoundVectors], X, classes) -> np.ndarray:
    """Margins of ``classes`` (scalar or one per row) at the rows of ``X``."""
    logits = bounded_forward(net, Z, np.asarray(X, dtype=np.float64))
    if logits.ndim == 1:
        logits = logits[None]
    n = logits.shape[0]
    c = np.broadcast_to(np.asarray(classes, dtype=np.intp), (n,))
    rows = np.arange(n)
    others = logits.copy()
    others[rows, c] = -np.inf
    return logits[rows, c] - others.max(axis=1)


def margin_gradient(net: Network, Z: Optional[BoundVectors], X, classes) -> tuple[np.ndarray, np.ndarray]:
    """Margins and their input gradients for a batch (rows are independent)."""
    g = Graph()
    x = g.leaf(X)
    logits, _ = trace(net, g, x, None if Z is None else Z.z)
    m = g.margin(logits, classes)
    grads = g.backward(g.sum(m))
    return m.data, grads[x]


def ascend(net: Network, Z: Optional[BoundVectors], X0, classes, steps: int = 50, step_size: float = 0.1,
           tol: float = 1e-9):
    """Batched projected gradient ascent on the margin with best-iterate memoization.

    Returns ``(best_x, best_margin, converged, aborted)``; every iterate stays in [0, 1]^d.
    """
    x = np.clip(np.array(X0, dtype=np.float64), 0.0, 1.0)
    n = x.shape[0]
    classes = np.broadcast_to(np.asarray(classes, dtype=np.intp), (n,))
    best_x = x.copy()
    best_m = np.full(n, -np.inf)
    prev = np.full(n, np.nan)
    converged = np.zeros(n, bool)
    aborted = False
    for step in range(steps + 1):
        try:
            m, grad = margin_gradient(net, Z, x, classes)
        except NonFiniteError:
            aborted = True
            break
        better = m > best_m
        best_m = np.where(better, m, best_m)
        best_x[better] = x[better]
        converged = np.abs(m - prev) <= tol
        if step == steps:
            break
        prev = m
        x = np.clip(x + step_size * grad, 0.0, 1.0)
    if not np.all(np.isfinite(best_m)):
        # abort before the first evaluation: report the start point
        best_m = margins(net, Z, best_x, classes)
    return best_x, best_m, converged, aborted


def ascend_margin(net: Network, Z: Optional[BoundVectors], c: int, x_init, cfg: AscentConfig = AscentConfig(),
                  restart: int = 0) -> MarginEstimate:
    x_init = np.asarray(x_init, dtype=np.float64)
    if x_init.min() < 0 or x_init.max() > 1:
        raise ValueError("x_init must lie in [0, 1]^d")
    bx, bm, conv, ab = ascend(net, Z, x_init[None], c, cfg.steps, cfg.step_size)
    return MarginEstimate(int(c), bx[0], float(bm[0]), restart, cfg.steps, bool(conv[0]), ab)


def random_starts(shape, count: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count,) + tuple(shape))


def estimate_class_margins(net: Network, Z: Optional[BoundVectors], c: int, J_c: Optional[int] = None,
                           seed: Optional[int] = None, cfg: AscentConfig = AscentConfig()) -> list[MarginEstimate]:
    """``J_c`` independent ascents from uniform starts, sorted by margin (largest first)."""
    J_c = cfg.restarts if J_c is None else J_c
    if J_c < 1:
        raise ValueError("J_c must be >= 1")
    seed = cfg.seed if seed is None else seed
    starts = random_starts(net.input_shape, J_c, seed)
    bx, bm, conv, ab = ascend(net, Z, starts, c, cfg.steps, cfg.step_size)
    out = [MarginEstimate(int(c), bx[j], float(bm[j]), j, cfg.steps, bool(conv[j]), ab) for j in range(J_c)]
    return sorted(out, key=lambda e: (-e.margin, e.restart))


def brute_force_margin(net: Network, Z: Optional[BoundVectors], c: int, grid_resolution: int = 101,
                       return_point: bool = False):
    """Exact maximum margin over a regular grid of [0, 1]^d (d <= 3 only)."""
    d = int(np.prod(net.input_shape))
    if d > 3:
        raise ValueError(f"grid oracle only supports input dim <= 3, got {d}")
    axis = np.linspace(0.0, 1.0, grid_resolution)
    pts = np.array(list(itertools.product(axis, repeat=d))).reshape((-1,) + net.input_shape)
    m = np.concatenate([margins(net, Z, pts[i:i + 20000], c) for i in range(0, len(pts), 20000)])
    i = int(np.argmax(m))
    return (float(m[i]), pts[i]) if return_point else float(m[i])


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def logit_input_gradients(net: Network, Z: Optional[BoundVectors], X, weights) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient of ``logits @ weights`` per row; returns (values, gradients)."""
    g = Graph()
    x = g.leaf(np.asarray(X, dtype=np.float64))
    logits, _ = trace(net, g, x, None if Z is None else Z.z)
    proj = g.matmul(logits, g.constant(np.asarray(weights, dtype=np.float64).reshape(-1, 1)))
    grads = g.backward(g.sum(proj))
    return proj.data[:, 0], grads[x]


def directional_overfit_stat(net: Network, delta, x_s, s: int, t: int,
                             Z: Optional[BoundVectors] = None) -> np.ndarray:
    """``delta . grad_x (f_t - f_s)(x_s)`` for each source sample (a float for a single sample).

    ``delta`` is one perturbation shared by all samples or one per sample.
    """
    if s == t:
        raise ValueError("source and target class must differ")
    x_s = np.asarray(x_s, dtype=np.float64)
    single = x_s.shape == net.input_shape
    X = x_s[None] if single else x_s
    w = np.zeros(net.num_classes)
    w[t], w[s] = 1.0, -1.0
    _, grad = logit_input_gradients(net, Z, X, w)
    delta = np.asarray(delta, dtype=np.float64)
    G = grad.reshape(len(X), -1)
    if delta.shape == X.shape and not single:
        # one perturbation per sample (e.g. a clamped trigger)
        stat = np.einsum("nd,nd->n", G, delta.reshape(len(X), -1))
    else:
        stat = G @ delta.reshape(-1)
    return float(stat[0]) if single else stat


def margin_floor(net: Network, X, y, Z: Optional[BoundVectors] = None) -> float:
    """Smallest true-class margin over the correctly classified samples."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("margin_floor: empty dataset")
    m = margins(net, Z, X, y)
    correct = m > 0
    if not correct.any():
        raise ValueError("margin_floor: no correctly classified samples")
    if not correct.all():
        warnings.warn(f"margin_floor: {int((~correct).sum())} misclassified samples excluded", stacklevel=2)
    return float(m[correct].min())


def gradient_norm_ratio(net: Network, Z: BoundVectors, X, c: int) -> np.ndarray:
    """``||grad f̄_c|| / ||grad f_c||`` per sample (nan where the unclipped gradient vanishes)."""
    w = np.eye(net.num_classes)[c]
    _, g0 = logit_input_gradients(net, None, X, w)
    _, g1 = logit_input_gradients(net, Z, X, w)
    n0 = np.linalg.norm(g0.reshape(len(g0), -1), axis=1)
    n1 = np.linalg.norm(g1.reshape(len(g1), -1), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n0 > 0, n1 / n0, np.nan)


def logit_preservation_report(net: Network, Z: BoundVectors, X) -> dict:
    """Per-class logit MSE between clipped and original network on ``X`` and mean gradient-norm ratios."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("logit_preservation_report: empty set")
    f = bounded_forward(net, None, X)
    fb = bounded_forward(net, Z, X)
    mse = ((fb - f) ** 2).mean(axis=0)
    ratio = np.array([np.nanmean(gradient_norm_ratio(net, Z, X, c)) for c in range(net.num_classes)])
    return {"mse": mse, "grad_ratio": ratio}
