"""End-to-end experiment driver.

``run_experiment`` builds the synthetic data for every seed, trains the
baseline networks, learns bounds and writes one directory per seed holding
checkpoints and CSVs.  ``report`` aggregates those CSVs across seeds.  Every
number in a report comes from a stored per-seed CSV.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgio
from . import mmdf
from .checkpoint import save_checkpoint
from .data import (CleanSet, Dataset, ImbalanceSpec, TriggerSpec, apply_imbalance, chessboard_trigger, embed_trigger,
                   patch_trigger, poison, split_clean_set, synth_classes)
from .margin import AscentConfig, directional_overfit_stat, gradient_norm_ratio, margin_floor
from .mitigation import IterationRecord, MitigationConfig, run_mitigation
from .network import PRESETS, BoundVectors, Network
from .training import EpochRecord, TrainConfig, evaluate, predict_labels, train

logger = logging.getLogger(__name__)

SCENARIOS = ("backdoor", "imbalance", "overtrain", "lambda_sweep", "objective_cross", "balanced")
# desk-scale lambda grid: the reference grid {0, 1e-7, ..., 1e-3} scaled by 300
DESK_LAMBDAS = (0.0, 3e-5, 3e-4, 3e-3, 3e-2, 0.3)
CALIBRATION_THETAS = (0.05, 0.01, 0.005, 0.001)
DEFAULT_EPOCHS = {"backdoor": 60}
DEFAULT_EPOCHS_OTHER = 30


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: Optional[int], cause: BaseException):
        where = f"seed {seed}, " if seed is not None else ""
        super().__init__(f"stage {stage!r} failed ({where}{type(cause).__name__}: {cause})")
        self.stage = stage
        self.seed = seed
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "backdoor"
    # synthetic data
    num_classes: int = 10
    shape: tuple[int, ...] = (64,)
    separation: float = 1.5
    noise: float = 1.0
    n0: int = 500
    clean_per_class: int = 50
    test_per_class: int = 200
    # class imbalance
    imbalance: str = "LT"
    gamma: float = 100.0
    # backdoor attack
    trigger: str = "chessboard"
    amplitude: float = 0.03
    patch_size: int = 3
    blend_alpha: float = 0.2
    target: int = 0
    poison_rate: float = 0.02
    # network and training; epochs = 0 picks the scenario default
    arch: str = "mlp3"
    epochs: int = 0
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    overtrain_factor: int = 5
    # bound learning
    lam: float = 3e-3
    lambdas: tuple[float, ...] = DESK_LAMBDAS
    max_iter: int = 300
    tol: float = 1e-4
    step: float = 0.1
    optimizer: str = "adam"
    min_iter: int = 100
    beta: float = 2.0
    ascent_steps: int = 10
    ascent_step_size: float = 0.1
    restarts: Optional[int] = None
    # defense
    theta: float = 0.005
    # run control
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.imbalance not in ("LT", "step"):
            raise ValueError("imbalance must be LT or step")
        if self.trigger not in ("chessboard", "patch", "blend"):
            raise ValueError("trigger must be chessboard, patch or blend")
        if self.arch not in PRESETS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "cnn_s" and len(self.shape) != 3:
            raise ValueError("cnn_s needs an image shape such as 1,16,16")
        if not 0 <= self.target < self.num_classes:
            raise ValueError("target class outside the label set")
        if self.scenario == "lambda_sweep" and not self.lambdas:
            raise ValueError("lambda_sweep needs a nonempty lambdas list")
        if self.epochs < 0 or self.workers < 1:
            raise ValueError("epochs must be >= 0 and workers >= 1")

    @property
    def train_epochs(self) -> int:
        return self.epochs or DEFAULT_EPOCHS.get(self.scenario, DEFAULT_EPOCHS_OTHER)

    def train_config(self, seed: int, factor: int = 1) -> TrainConfig:
        return TrainConfig(epochs=self.train_epochs * factor, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, seed=seed)

    def mitigation_config(self, seed: int, lam: Optional[float] = None) -> MitigationConfig:
        return MitigationConfig(lam=self.lam if lam is None else lam, max_iter=self.max_iter, tol=self.tol,
                                step=self.step, optimizer=self.optimizer, min_iter=self.min_iter, beta=self.beta,
                                ascent=AscentConfig(steps=self.ascent_steps, step_size=self.ascent_step_size),
                                restarts=self.restarts, seed=seed)

    def hash(self) -> str:
        # output location and worker count do not change any number
        return cfgio.config_hash(self, exclude=("out_dir", "workers"))


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Config file values first, then ``overrides`` (command-line flags win)."""
    values = cfgio.read_config(path) if path is not None else {}
    values.update(overrides or {})
    return cfgio.build(ExperimentConfig, values)


# ---------------------------------------------------------------------------
# data, models and metrics
# ---------------------------------------------------------------------------

def _flat(ds: Dataset) -> Dataset:
    return Dataset(ds.X.reshape(len(ds), -1), ds.y, ds.num_classes, ds.poisoned)


def make_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """(training pool, clean set D, test set) for one seed; test data shares the class prototypes."""
    tr = synth_classes(cfg.num_classes, cfg.shape, separation=cfg.separation, n_per_class=cfg.n0 + cfg.clean_per_class,
                       seed=seed, noise=cfg.noise)
    te = synth_classes(cfg.num_classes, cfg.shape, separation=cfg.separation, n_per_class=cfg.test_per_class,
                       seed=seed + 10_000, prototypes_seed=seed, noise=cfg.noise)
    D, pool = split_clean_set(tr, cfg.clean_per_class, seed=seed)
    if cfg.arch == "mlp3" and len(cfg.shape) > 1:
        D, pool, te = CleanSet(D.X.reshape(len(D), -1), D.y, D.num_classes), _flat(pool), _flat(te)
    return pool, D, te


def make_trigger(cfg: ExperimentConfig) -> TriggerSpec:
    if cfg.trigger == "chessboard":
        spec = chessboard_trigger(cfg.shape, cfg.amplitude, cfg.target)
    else:
        blend = cfg.blend_alpha if cfg.trigger == "blend" else None
        position = (0, 0) if len(cfg.shape) > 1 else (0,)
        spec = patch_trigger(cfg.shape, cfg.patch_size, position, cfg.target, blend=blend)
    if cfg.arch == "mlp3" and len(cfg.shape) > 1:
        mask = None if spec.mask is None else spec.mask.reshape(-1)
        spec = TriggerSpec(spec.kind, spec.pattern.reshape(-1), spec.target, mask, spec.alpha)
    return spec


def make_network(cfg: ExperimentConfig, seed: int) -> Network:
    if cfg.arch == "mlp3":
        return PRESETS["mlp3"](int(np.prod(cfg.shape)), cfg.num_classes, seed=seed)
    return PRESETS["cnn_s"](tuple(cfg.shape), cfg.num_classes, seed=seed)


@dataclass(frozen=True)
class AttackMetrics:
    asr: float      # percent of triggered non-target test samples decided as the target
    acc: float      # percent correct on the untriggered test set
    pacc: float     # percent of triggered non-target samples decided as their true class


def compute_attack_metrics(model, test: Dataset, trigger: TriggerSpec) -> AttackMetrics:
    """ASR, ACC and PACC (in percent) of a network, a (network, bounds) pair or a defended model."""
    if test.poisoned.any():
        raise ValueError("attack metrics need a clean test set")
    counts = test.class_counts
    if counts.min() != counts.max():
        raise ValueError(f"attack metrics need a class-balanced test set, got counts {counts.tolist()}")
    src = np.flatnonzero(test.y != trigger.target)
    if len(src) == 0:
        raise ValueError("no non-target test samples to trigger")
    pred_t = predict_labels(model, embed_trigger(test.X[src], trigger))
    pred = predict_labels(model, test.X)
    return AttackMetrics(asr=100.0 * float(np.mean(pred_t == trigger.target)),
                         acc=100.0 * float(np.mean(pred == test.y)),
                         pacc=100.0 * float(np.mean(pred_t == test.y[src])))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and unbiased standard deviation (nan for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else math.nan)


# ---------------------------------------------------------------------------
# per-seed runs
# ---------------------------------------------------------------------------

METRIC_HEADER = ("scenario", "seed", "model", "lam", "metric", "value")


class _SeedRun:
    """Collects the CSV rows of one seed and writes them on demand."""

    def __init__(self, cfg: ExperimentConfig, seed: int, root: Path):
        self.cfg = cfg
        self.seed = seed
        self.dir = root / f"seed_{seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.digest = cfg.hash()
        self.metrics: list[tuple] = []
        self.per_class: list[tuple] = []
        self.log = []

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            self.flush()
            (self.dir / "failure.txt").write_text(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n")
            raise StageError(name, self.seed, exc) from exc
        self.log.append(f"{name}\t{time.perf_counter() - t0:.2f}s")

    def metric(self, model: str, name: str, value: float, lam: Optional[float] = None) -> None:
        self.metrics.append((self.cfg.scenario, self.seed, model, "" if lam is None else lam, name, float(value)))

    def accuracy(self, model: str, net_or_pair, test: Dataset, lam: Optional[float] = None):
        m = evaluate(net_or_pair, test)
        self.metric(model, "ACC", 100.0 * m.acc, lam)
        for c, a in enumerate(m.per_class):
            self.per_class.append((self.seed, model, "" if lam is None else lam, c, 100.0 * float(a)))
        return m

    def attack(self, model: str, obj, test: Dataset, trigger: TriggerSpec) -> AttackMetrics:
        am = compute_attack_metrics(obj, test, trigger)
        for name in ("asr", "acc", "pacc"):
            self.metric(model, name.upper(), getattr(am, name))
        return am

    def training_curve(self, name: str, history: Sequence[EpochRecord]) -> None:
        rows = [(r.epoch, r.loss, r.train_acc, "" if r.test_acc is None else r.test_acc) for r in history]
        cfgio.write_csv(self.dir / f"training_{name}.csv", ("epoch", "loss", "train_acc", "test_acc"), rows,
                        self.digest)

    def mitigation_history(self, name: str, history: Sequence[IterationRecord]) -> None:
        k = self.cfg.num_classes
        header = ("iteration", "loss", "term1", "term2") + tuple(f"mm_{c}" for c in range(k))
        rows = [(h.iteration, h.loss, h.term1, h.term2, *map(float, h.class_margins)) for h in history]
        cfgio.write_csv(self.dir / f"history_{name}.csv", header, rows, self.digest)
        first, last = history[0].class_margins, history[-1].class_margins
        cfgio.write_csv(self.dir / f"margins_{name}.csv", ("class", "initial_mean_margin", "final_mean_margin"),
                        [(c, float(first[c]), float(last[c])) for c in range(k)], self.digest)

    def flush(self) -> None:
        cfgio.write_csv(self.dir / "metrics.csv", METRIC_HEADER, self.metrics, self.digest)
        cfgio.write_csv(self.dir / "per_class.csv", ("seed", "model", "lam", "class", "acc"), self.per_class,
                        self.digest)
        (self.dir / "run.log").write_text("\n".join(self.log) + "\n")


def _train(run: _SeedRun, name: str, ds: Dataset, factor: int = 1) -> Network:
    with run.stage(f"train:{name}"):
        net, hist = train(make_network(run.cfg, run.seed), ds, run.cfg.train_config(run.seed, factor))
        run.training_curve(name, hist)
        save_checkpoint(net, run.dir / f"{name}.ckpt")
    return net


def _mitigate(run: _SeedRun, name: str, net: Network, D, objective: str,
              lam: Optional[float] = None) -> tuple[BoundVectors, list[IterationRecord]]:
    with run.stage(f"mitigate:{name}"):
        Z, hist = run_mitigation(net, D, run.cfg.mitigation_config(run.seed, lam), objective)
        run.mitigation_history(name, hist)
        save_checkpoint(net, run.dir / f"{name}.ckpt", Z)
    return Z, hist


def _imbalanced_pool(cfg: ExperimentConfig, pool: Dataset, seed: int) -> Dataset:
    return apply_imbalance(pool, ImbalanceSpec(cfg.imbalance, cfg.gamma, cfg.n0), seed=seed)


def _balanced_subset(ds: Dataset, per_class: int) -> Dataset:
    idx = np.concatenate([np.flatnonzero(ds.y == c)[:per_class] for c in range(ds.num_classes)])
    return ds.subset(np.sort(idx))


def _run_backdoor(run: _SeedRun, pool, D, test) -> None:
    cfg, seed = run.cfg, run.seed
    trigger = make_trigger(cfg)
    clean = _train(run, "clean", pool)
    run.accuracy("clean", clean, test)
    with run.stage("poison"):
        poisoned_pool = poison(pool, trigger, cfg.poison_rate, seed=seed)
    net = _train(run, "poisoned", poisoned_pool)
    with run.stage("evaluate:poisoned"):
        run.attack("poisoned", net, test, trigger)
    Z, _ = _mitigate(run, "mmac", net, D, "mmac")
    with run.stage("evaluate:mmac"):
        run.attack("mmac", (net, Z), test, trigger)
    with run.stage("defend"):
        null = mmdf.fit_null(net, Z, D, cfg.theta)
        run.metric("mmdf", "null_mean", null.mean)
        run.metric("mmdf", "null_std", null.std)
        run.attack("mmdf", mmdf.DefendedModel(net, Z, null), test, trigger)
        calib = _balanced_subset(test, 1000 // cfg.num_classes)
        verdicts = mmdf.defend_batch(net, Z, null, calib.X)
        s = np.array([v.statistic for v in verdicts])
        p = np.atleast_1d(mmdf.p_value(null, s))
        agree = np.array([v.reason != "disagreement" for v in verdicts])
        run.metric("mmdf", "calibration_n", len(calib))
        run.metric("mmdf", "disagreement_rate", float(np.mean(~agree)))
        for theta in CALIBRATION_THETAS:
            anomalous = agree & (p < theta)
            run.metric("mmdf", f"anomalous_rate@{theta}", float(np.mean(anomalous)))
            run.metric("mmdf", f"flags@{theta}", float(np.sum(~agree | (p < theta))))
    with run.stage("diagnose"):
        tau = margin_floor(net, poisoned_pool.X, poisoned_pool.y)
        src = test.subset(np.flatnonzero(test.y != cfg.target))
        delta = _trigger_delta(trigger, src.X)
        before = np.concatenate([directional_overfit_stat(net, delta[src.y == s], src.X[src.y == s], s, cfg.target)
                                 for s in np.unique(src.y)])
        after = np.concatenate([directional_overfit_stat(net, delta[src.y == s], src.X[src.y == s], s, cfg.target, Z)
                                for s in np.unique(src.y)])
        ratio = gradient_norm_ratio(net, Z, src.X, cfg.target)
        run.metric("diagnostic", "tau", tau)
        run.metric("diagnostic", "overfit_fraction", float(np.mean(before > 2 * tau)))
        run.metric("diagnostic", "stat_before", float(before.mean()))
        run.metric("diagnostic", "stat_after", float(after.mean()))
        run.metric("diagnostic", "grad_ratio", float(np.nanmean(ratio)))


def _trigger_delta(trigger: TriggerSpec, X: np.ndarray) -> np.ndarray:
    """Per-sample perturbation actually added by the trigger (clamping included)."""
    return embed_trigger(X, trigger) - X


def _run_imbalance(run: _SeedRun, pool, D, test) -> None:
    net = _train(run, "ce", _imbalanced_pool(run.cfg, pool, run.seed))
    run.accuracy("ce", net, test)
    Z, _ = _mitigate(run, "mmom", net, D, "mmom")
    run.accuracy("mmom", (net, Z), test)


def _run_overtrain(run: _SeedRun, pool, D, test) -> None:
    ds = _imbalanced_pool(run.cfg, pool, run.seed)
    for name, factor in (("ce", 1), ("ce_overtrained", run.cfg.overtrain_factor)):
        net = _train(run, name, ds, factor)
        run.accuracy(name, net, test)
        Z, _ = _mitigate(run, name.replace("ce", "mmom"), net, D, "mmom")
        run.accuracy(name.replace("ce", "mmom"), (net, Z), test)


def _run_lambda_sweep(run: _SeedRun, pool, D, test) -> None:
    net = _train(run, "ce", _imbalanced_pool(run.cfg, pool, run.seed))
    run.accuracy("ce", net, test)
    for lam in run.cfg.lambdas:
        Z, _ = _mitigate(run, f"mmom_lam{lam!r}", net, D, "mmom", lam)
        run.accuracy("mmom", (net, Z), test, lam=lam)


def _run_objective_cross(run: _SeedRun, pool, D, test) -> None:
    net = _train(run, "ce", _imbalanced_pool(run.cfg, pool, run.seed))
    run.accuracy("ce", net, test)
    for objective in ("mmom", "mmac"):
        Z, hist = _mitigate(run, objective, net, D, objective)
        run.accuracy(objective, (net, Z), test)
        run.metric(objective, "term1_final", hist[-1].term1)


def _run_balanced(run: _SeedRun, pool, D, test) -> None:
    net = _train(run, "ce", pool)
    run.accuracy("ce", net, test)
    Z, _ = _mitigate(run, "mmom", net, D, "mmom")
    run.accuracy("mmom", (net, Z), test)


_SCENARIO_RUNNERS = {
    "backdoor": _run_backdoor,
    "imbalance": _run_imbalance,
    "overtrain": _run_overtrain,
    "lambda_sweep": _run_lambda_sweep,
    "objective_cross": _run_objective_cross,
    "balanced": _run_balanced,
}


def run_seed(cfg: ExperimentConfig, seed: int, root) -> Path:
    run = _SeedRun(cfg, seed, Path(root))
    with run.stage("data"):
        pool, D, test = make_data(cfg, seed)
    _SCENARIO_RUNNERS[cfg.scenario](run, pool, D, test)
    run.flush()
    return run.dir


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every seed of ``cfg`` into ``cfg.out_dir`` and write the aggregated report there."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(cfgio.dump(cfg))
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.seeds))) as ex:
            list(ex.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds, [root] * len(cfg.seeds)))
    else:
        for seed in cfg.seeds:
            run_seed(cfg, seed, root)
    report([root], root)
    return root


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

SUMMARY_HEADER = ("scenario", "model", "lam", "metric", "n", "mean", "std")


class ReportError(ValueError):
    pass


def collect_metrics(run_dirs: Sequence) -> list[dict]:
    rows = []
    for d in run_dirs:
        files = sorted(Path(d).glob("seed_*/metrics.csv")) or sorted(Path(d).glob("metrics.csv"))
        if not files:
            raise ReportError(f"{d}: no completed runs (metrics.csv) found")
        for f in files:
            rows.extend(cfgio.read_csv(f)[1])
    return rows


def aggregate(rows: Sequence[dict]) -> list[tuple]:
    scenarios = {r["scenario"] for r in rows}
    if len(scenarios) > 1:
        raise ReportError(f"cannot combine different scenarios: {', '.join(sorted(scenarios))}")
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["model"], r["lam"], r["metric"]), []).append(float(r["value"]))
    out = []
    for key, values in groups.items():
        mean, std = mean_std(values)
        out.append(key + (len(values), mean, std))
    return out


def _fmt_number(x: float) -> str:
    return "-" if math.isnan(x) else f"{x:.4g}"


def report(run_dirs: Sequence, out=None) -> Path:
    """Write ``summary.csv`` and ``summary.txt`` (mean and unbiased std across seeds)."""
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    out = Path(out if out is not None else run_dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    table = aggregate(collect_metrics(run_dirs))
    hashes = sorted({cfgio.read_csv(f)[2] or "" for d in run_dirs for f in Path(d).glob("seed_*/metrics.csv")})
    digest = hashes[0] if len(hashes) == 1 else "mixed:" + ",".join(h[:12] for h in hashes)
    cfgio.write_csv(out / "summary.csv", SUMMARY_HEADER, table, digest)
    width = max([len(r[1]) for r in table] + [5])
    lines = [f"{'model':<{width}}  {'lam':>8}  {'metric':<22} {'n':>2}  mean ± std"]
    for scen, model, lam, metric, n, mean, std in table:
        lines.append(f"{model:<{width}}  {lam:>8}  {metric:<22} {n:>2}  {_fmt_number(mean)} ± {_fmt_number(std)}")
    (out / "summary.txt").write_text(f"scenario: {table[0][0] if table else '-'}\n" + "\n".join(lines) + "\n")
    return out
