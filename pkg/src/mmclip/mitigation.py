"""Alternating minimax learning of activation bounds (MMAC / MMOM).

Both objectives share a max-margin penalty: the mean, over classes and over
``J_c`` ascent points per class, of the clipped network's margin at those
points.  MMAC pairs it with logit preservation (MSE against the original
network on the clean set); MMOM with cross-entropy on the clean set.

Only the bounds move; every network weight stays frozen.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CleanSet
from .engine import Graph, NonFiniteError
from .margin import AscentConfig, ascend, random_starts
from .network import EPS_Z, BoundVectors, Network, bounded_forward, init_bounds, trace

logger = logging.getLogger(__name__)

OBJECTIVES = ("mmac", "mmom")


@dataclass(frozen=True)
class MitigationConfig:
    lam: float = 3e-3
    max_iter: int = 300
    tol: float = 1e-4
    step: float = 0.1
    optimizer: str = "adam"         # "adam" or "sgd" (fixed step), both on normalized bounds
    min_iter: int = 100             # the loss-difference stop is only checked from here on
    beta: float = 2.0
    # points are warm-started every round, so a short inner ascent suffices
    ascent: AscentConfig = field(default_factory=lambda: AscentConfig(steps=10))
    restarts: Optional[int] = None  # J_c; defaults to the clean-set size per class
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_iter < 1 or self.tol <= 0 or self.step <= 0:
            raise ValueError("max_iter, tol and step must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class MarginPoints:
    """``J`` ascent points per class, stored class-major."""

    X: np.ndarray
    classes: np.ndarray
    values: Optional[np.ndarray] = None

    @classmethod
    def random(cls, net: Network, J: int, seed: int) -> "MarginPoints":
        X = random_starts(net.input_shape, J * net.num_classes, seed)
        return cls(X, np.repeat(np.arange(net.num_classes), J))

    @property
    def per_class(self) -> int:
        return len(self.classes) // int(self.classes.max() + 1)

    def class_means(self, num_classes: int) -> np.ndarray:
        return np.array([self.values[self.classes == c].mean() for c in range(num_classes)])


@dataclass
class LossParts:
    total: float
    term1: float
    term2: float
    grad: Optional[list] = None     # d total / d z, one array per clippable layer


def _loss(net: Network, Z: BoundVectors, X, target, points: MarginPoints, lam: float, objective: str,
          with_grad: bool) -> LossParts:
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    g = Graph()
    zs = [g.leaf(z, requires_grad=with_grad) for z in Z.z]
    logits, _ = trace(net, g, X, zs)
    if objective == "mmac":
        t1 = g.mse(logits, g.constant(target))
    else:
        t1 = g.softmax_ce(logits, target)
    parts = [t1]
    coefs = [1.0]
    t2_val = 0.0
    if points is not None and len(points.classes):
        mlogits, _ = trace(net, g, points.X, zs)
        # classes hold equal J_c, so the class-then-restart average is a plain mean
        t2 = g.mean(g.margin(mlogits, points.classes))
        parts.append(t2)
        coefs.append(lam)
        t2_val = float(t2.data)
    total = g.scalar_combine(parts, coefs)
    grad = None
    if with_grad:
        grads = g.backward(total)
        grad = [grads[z] for z in zs]
    return LossParts(float(total.data), float(t1.data), t2_val, grad)


def loss_mmac(net: Network, Z: BoundVectors, D, points: Optional[MarginPoints], lam: float = 3e-3,
              with_grad: bool = False) -> LossParts:
    """Mean squared logit deviation on ``D`` plus ``lam`` times the mean margin at ``points``."""
    X = D.X if hasattr(D, "X") else np.asarray(D)
    return _loss(net, Z, X, bounded_forward(net, None, X), points, lam, "mmac", with_grad)


def loss_mmom(net: Network, Z: BoundVectors, D, points: Optional[MarginPoints], lam: float = 3e-3,
              with_grad: bool = False) -> LossParts:
    """Mean cross-entropy of the clipped network on ``D`` plus the same margin penalty."""
    return _loss(net, Z, D.X, D.y, points, lam, "mmom", with_grad)


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    term1: float
    term2: float
    class_margins: np.ndarray


class MitigationAborted(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def run_mitigation(net: Network, D: CleanSet, cfg: MitigationConfig = MitigationConfig(),
                   objective: str = "mmac") -> tuple[BoundVectors, list[IterationRecord]]:
    """Learn bounds by alternating margin ascent (bounds fixed) and a bound descent step (points fixed)."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    counts = D.class_counts
    if len(D) == 0 or counts.min() != counts.max():
        raise ValueError("mitigation needs a balanced, nonempty clean set")
    J = cfg.restarts or int(counts[0])
    Z = init_bounds(net, D.X, cfg.beta)
    scale = [z.copy() for z in Z.z]
    u = [np.ones_like(z) for z in Z.z]
    m1 = [np.zeros_like(z) for z in Z.z]
    m2 = [np.zeros_like(z) for z in Z.z]
    points = MarginPoints.random(net, J, cfg.seed)
    target = bounded_forward(net, None, D.X) if objective == "mmac" else D.y
    history: list[IterationRecord] = []
    prev = None
    for it in range(cfg.max_iter):
        try:
            points.X, points.values, _, aborted = ascend(net, Z, points.X, points.classes,
                                                         cfg.ascent.steps, cfg.ascent.step_size)
            parts = _loss(net, Z, D.X, target, points, cfg.lam, objective, with_grad=True)
        except NonFiniteError as exc:
            raise MitigationAborted(f"non-finite loss at iteration {it}: {exc}", history) from None
        history.append(IterationRecord(it, parts.total, parts.term1, parts.term2,
                                       points.class_means(net.num_classes)))
        logger.debug("iter %d loss %.6g (%.6g + lam * %.6g)", it, parts.total, parts.term1, parts.term2)
        if it >= cfg.min_iter and prev is not None and abs(parts.total - prev) < cfg.tol:
            break
        prev = parts.total
        new = []
        for i, (s, gz) in enumerate(zip(scale, parts.grad)):
            gu = gz * s
            if cfg.optimizer == "adam":
                b1, b2 = 0.9, 0.999
                m1[i] = b1 * m1[i] + (1 - b1) * gu
                m2[i] = b2 * m2[i] + (1 - b2) * gu * gu
                mh = m1[i] / (1 - b1 ** (it + 1))
                vh = m2[i] / (1 - b2 ** (it + 1))
                u[i] = u[i] - cfg.step * mh / (np.sqrt(vh) + 1e-8)
            else:
                u[i] = u[i] - cfg.step * gu
            u[i] = np.maximum(u[i], EPS_Z / s)
            new.append(u[i] * s)
        Z = BoundVectors(tuple(new))
    return Z, history
