"""Sample-level defense combining an original network with its clipped twin.

A sample is flagged when the two networks disagree, or when the original
network is anomalously more confident than the clipped one.  "Anomalous" is
judged against a Gaussian fitted to the confidence difference on a clean set.
The corrected decision is always the clipped network's label.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax
from scipy.stats import norm

from .config import write_csv
from .network import BoundVectors, Network, bounded_forward

MIN_NULL_SAMPLES = 30
MIN_NULL_STD = 1e-9
REASONS = ("disagreement", "anomalous_confidence", "none")


class DegenerateNullError(ValueError):
    """The confidence-difference statistic has (near) zero spread on the clean set."""


@dataclass(frozen=True)
class NullModel:
    mean: float
    std: float
    theta: float = 0.005

    def __post_init__(self):
        if not np.isfinite(self.std) or self.std < MIN_NULL_STD:
            raise DegenerateNullError(f"null standard deviation {self.std!r} is degenerate")
        if not 0.0 < self.theta < 0.5:
            raise ValueError("theta must lie in (0, 0.5)")


@dataclass(frozen=True)
class DefenseVerdict:
    label: int
    flagged: bool
    reason: str = "none"
    p_value: Optional[float] = None
    original_label: Optional[int] = None
    clipped_label: Optional[int] = None
    statistic: Optional[float] = None

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")
        if self.flagged == (self.reason == "none"):
            raise ValueError("a verdict is flagged exactly when it carries a reason")


def confidence(logits: np.ndarray) -> np.ndarray:
    """Maximum softmax probability per row."""
    return softmax(np.atleast_2d(logits), axis=1).max(axis=1)


def _both(net: Network, Z: BoundVectors, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.shape == net.input_shape
    if single:
        X = X[None]
    return bounded_forward(net, None, X), bounded_forward(net, Z, X), single


def statistic(net: Network, Z: BoundVectors, X) -> np.ndarray:
    """``conf_f(x) - conf_fbar(x)`` for each row of ``X``."""
    f, fb, _ = _both(net, Z, X)
    return confidence(f) - confidence(fb)


def fit_null(net: Network, Z: BoundVectors, D, theta: float = 0.005) -> NullModel:
    """Fit the Gaussian null of the confidence difference on the clean set ``D``."""
    X = D.X if hasattr(D, "X") else np.asarray(D)
    if len(X) < MIN_NULL_SAMPLES:
        raise ValueError(f"the null needs at least {MIN_NULL_SAMPLES} clean samples, got {len(X)}")
    s = statistic(net, Z, X)
    return null_from_statistics(s, theta)


def null_from_statistics(s, theta: float = 0.005) -> NullModel:
    s = np.asarray(s, dtype=np.float64)
    # sample standard deviation (ddof=1), the usual unbiased-variance estimate
    std = float(s.std(ddof=1)) if len(s) > 1 else 0.0
    return NullModel(float(s.mean()), std, theta)


def p_value(null: NullModel, s) -> np.ndarray | float:
    """Upper-tail Gaussian p-value of the statistic ``s`` under ``null``."""
    p = norm.sf((np.asarray(s, dtype=np.float64) - null.mean) / null.std)
    return float(p) if np.ndim(p) == 0 else p


def defend_batch(net: Network, Z: BoundVectors, null: NullModel, X,
                 theta: Optional[float] = None) -> list[DefenseVerdict]:
    theta = null.theta if theta is None else theta
    f, fb, _ = _both(net, Z, X)
    lab, lab_bar = f.argmax(axis=1), fb.argmax(axis=1)
    s = confidence(f) - confidence(fb)
    p = p_value(null, s)
    p = np.atleast_1d(p)
    out = []
    for i in range(len(f)):
        common = dict(p_value=float(p[i]), original_label=int(lab[i]), clipped_label=int(lab_bar[i]),
                      statistic=float(s[i]))
        if lab[i] != lab_bar[i]:
            out.append(DefenseVerdict(int(lab_bar[i]), True, "disagreement", **common))
        elif p[i] < theta:
            out.append(DefenseVerdict(int(lab_bar[i]), True, "anomalous_confidence", **common))
        else:
            out.append(DefenseVerdict(int(lab[i]), False, "none", **common))
    return out


def defend(net: Network, Z: BoundVectors, null: NullModel, x, theta: Optional[float] = None) -> DefenseVerdict:
    """Verdict for a single sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"expected a single sample of shape {net.input_shape}, got {x.shape}")
    return defend_batch(net, Z, null, x[None], theta)[0]


def write_verdicts(path, verdicts: Sequence[DefenseVerdict], ids: Optional[Sequence] = None,
                   config_hash: Optional[str] = None) -> None:
    """Verdict stream as CSV: sample id, both labels, statistic, p-value and reason."""
    ids = range(len(verdicts)) if ids is None else ids
    rows = [(i, v.original_label, v.clipped_label, v.label, v.statistic, v.p_value, int(v.flagged), v.reason)
            for i, v in zip(ids, verdicts)]
    write_csv(path, ("sample_id", "original_label", "clipped_label", "final_label", "statistic", "p_value",
                     "flagged", "reason"), rows, config_hash)


@dataclass(frozen=True)
class DefendedModel:
    """The original network, its clipped twin and a fitted null, scored as one classifier."""

    net: Network
    Z: BoundVectors
    null: NullModel

    def verdicts(self, X, theta: Optional[float] = None) -> list[DefenseVerdict]:
        return defend_batch(self.net, self.Z, self.null, X, theta)

    def predict(self, X) -> np.ndarray:
        return np.array([v.label for v in self.verdicts(X)], dtype=np.int64)
