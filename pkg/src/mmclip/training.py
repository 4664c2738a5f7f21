"""Cross-entropy baseline training and accuracy evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .engine import Graph, NonFiniteError
from .network import Network, bounded_forward, trace

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, history: list):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # step decay: multiply lr by decay_factor at these fractions of the run
    decay_at: tuple = (0.5, 0.75)
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def overtrain(self, factor: int = 5) -> "TrainConfig":
        """Same schedule shape stretched over ``factor`` times as many epochs."""
        return replace(self, epochs=self.epochs * factor)

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(f * self.epochs) for f in self.decay_at)
        return self.lr * self.decay_factor ** drops


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    test_acc: Optional[float] = None


def train(net: Network, ds: Dataset, cfg: TrainConfig = TrainConfig(), test: Optional[Dataset] = None,
          callback: Optional[Callable[[EpochRecord], None]] = None) -> tuple[Network, list[EpochRecord]]:
    """SGD with momentum on mean cross-entropy; returns the trained network and per-epoch records."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = [{k: v.copy() for k, v in p.items()} for p in net.params]
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    history: list[EpochRecord] = []
    n = len(ds)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = Graph()
            leaves = [{k: g.leaf(v) for k, v in p.items()} for p in params]
            try:
                logits, _ = trace(net, g, ds.X[idx], params=leaves)
                loss = g.softmax_ce(logits, ds.y[idx])
                grads = g.backward(loss)
            except NonFiniteError:
                raise DivergenceError(epoch, history) from None
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == ds.y[idx]).sum())
            for p, v, lp in zip(params, velocity, leaves):
                for k in p:
                    step = grads[lp[k]] + cfg.weight_decay * p[k]
                    v[k] = cfg.momentum * v[k] + step
                    p[k] = p[k] - lr * v[k]
        rec = EpochRecord(epoch, total / n, correct / n)
        if not np.isfinite(rec.loss):
            raise DivergenceError(epoch, history)
        if test is not None:
            rec.test_acc = evaluate(net.with_params(params), test).acc
        history.append(rec)
        if callback is not None:
            callback(rec)
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, rec.loss, rec.train_acc)
    return net.with_params(params), history


@dataclass
class Metrics:
    acc: float                   # fraction in [0, 1]
    per_class: np.ndarray        # per-class accuracy (nan for absent classes)
    confusion: np.ndarray = field(repr=False, default=None)


def predict_labels(model, X, batch: int = 4096) -> np.ndarray:
    """Decisions of a Network, a (Network, BoundVectors) pair, or any object with ``predict``."""
    X = np.asarray(X, dtype=np.float64)
    if hasattr(model, "predict") and not isinstance(model, Network):
        return np.asarray(model.predict(X))
    if isinstance(model, tuple):
        net, Z = model
    else:
        net, Z = model, None
    out = [bounded_forward(net, Z, X[i:i + batch]).argmax(axis=1) for i in range(0, len(X), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, ds: Dataset) -> Metrics:
    pred = predict_labels(model, ds.X)
    k = ds.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (ds.y, pred), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf) / support, np.nan)
    acc = float(np.trace(conf) / max(len(ds), 1))
    return Metrics(acc, per_class, conf)
