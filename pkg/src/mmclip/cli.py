"""Command-line entry point: ``mmclip <verb> [--config FILE] [--key value ...]``.

Any experiment setting can come from a ``key=value`` config file or from a
``--key value`` flag; flags win.  Exit codes: 0 success, 2 configuration
error, 3 a stage failed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgio
from . import harness, mmdf
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CleanSet, Dataset, load_external, poison, save_csv, save_raw
from .margin import (AscentConfig, directional_overfit_stat, estimate_class_margins, logit_preservation_report,
                     margin_floor)
from .mitigation import OBJECTIVES, run_mitigation
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
IMBALANCED_SCENARIOS = ("imbalance", "overtrain", "lambda_sweep", "objective_cross")

logger = logging.getLogger("mmclip")


def parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs into a flat dict (dashes become underscores)."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise cfgio.ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise cfgio.ConfigError(f"flag {tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmclip", description="Max-margin activation clipping toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value settings file")
        return sp

    sp = verb("gen-data", "write synthetic train / clean / test sets")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--format", choices=("raw", "csv"), default="raw")
    sp.add_argument("--seed", type=int, default=None)

    sp = verb("poison", "embed the configured trigger into a fraction of a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = verb("train", "train a baseline network with cross-entropy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--curve", help="training-curve CSV path")
    sp.add_argument("--seed", type=int, default=None)

    sp = verb("mitigate", "learn activation bounds on a clean set")
    sp.add_argument("--model", required=True)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path (network plus bounds)")
    sp.add_argument("--objective", choices=OBJECTIVES, default="mmac")
    sp.add_argument("--history", help="history CSV path")
    sp.add_argument("--seed", type=int, default=None)

    sp = verb("defend", "run the two-model defense over a dataset")
    sp.add_argument("--model", required=True, help="checkpoint carrying bounds")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="verdict CSV path")

    sp = verb("margins", "estimate per-class maximum margins")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--restarts", type=int, default=10)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--seed", type=int, default=None)

    sp = verb("diagnose", "overfitting-inequality and logit-preservation diagnostics")
    sp.add_argument("--model", required=True, help="checkpoint, optionally with bounds")
    sp.add_argument("--train-data", required=True, help="training set used for the margin floor")
    sp.add_argument("--test", required=True, help="clean test set (source samples are triggered)")
    sp.add_argument("--clean", help="clean set for the logit-preservation report")
    sp.add_argument("--out", required=True)

    sp = verb("experiment", "run a full scenario over all seeds")
    sp.add_argument("--out", help="output directory (overrides out_dir)")

    sp = verb("report", "aggregate finished runs")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", help="directory for summary.csv / summary.txt")
    return p


def _dataset(path, cfg: harness.ExperimentConfig) -> Dataset:
    ds = load_external(path, num_classes=cfg.num_classes)
    want = (int(np.prod(cfg.shape)),) if cfg.arch == "mlp3" else tuple(cfg.shape)
    if ds.input_shape != want:
        if int(np.prod(ds.input_shape)) != int(np.prod(want)):
            raise ValueError(f"{path}: samples of shape {ds.input_shape} do not match configured shape {want}")
        ds = Dataset(ds.X.reshape((len(ds),) + want), ds.y, ds.num_classes)
    return ds


def _clean(path, cfg) -> CleanSet:
    ds = _dataset(path, cfg)
    return CleanSet(ds.X, ds.y, ds.num_classes)


def _save(ds: Dataset, path: Path, fmt: str) -> None:
    (save_raw if fmt == "raw" else save_csv)(ds, path)


def _seed(args, cfg) -> int:
    return args.seed if getattr(args, "seed", None) is not None else cfg.seeds[0]


def cmd_gen_data(args, cfg) -> None:
    seed = _seed(args, cfg)
    pool, D, test = harness.make_data(cfg, seed)
    if cfg.scenario in IMBALANCED_SCENARIOS:
        pool = harness._imbalanced_pool(cfg, pool, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "bin" if args.format == "raw" else "csv"
    for name, ds in (("train", pool), ("clean", D), ("test", test)):
        _save(ds, out / f"{name}.{ext}", args.format)


def cmd_poison(args, cfg) -> None:
    ds = _dataset(args.data, cfg)
    out = poison(ds, harness.make_trigger(cfg), cfg.poison_rate, seed=_seed(args, cfg))
    _save(out, Path(args.out), "csv" if str(args.out).endswith(".csv") else "raw")


def cmd_train(args, cfg) -> None:
    seed = _seed(args, cfg)
    net, hist = train(harness.make_network(cfg, seed), _dataset(args.data, cfg), cfg.train_config(seed))
    save_checkpoint(net, args.out)
    if args.curve:
        cfgio.write_csv(args.curve, ("epoch", "loss", "train_acc", "test_acc"),
                        [(r.epoch, r.loss, r.train_acc, "") for r in hist], cfg.hash())


def cmd_mitigate(args, cfg) -> None:
    net, _ = load_checkpoint(args.model)
    Z, hist = run_mitigation(net, _clean(args.clean, cfg), cfg.mitigation_config(_seed(args, cfg)), args.objective)
    save_checkpoint(net, args.out, Z)
    if args.history:
        header = ("iteration", "loss", "term1", "term2") + tuple(f"mm_{c}" for c in range(net.num_classes))
        cfgio.write_csv(args.history, header,
                        [(h.iteration, h.loss, h.term1, h.term2, *map(float, h.class_margins)) for h in hist],
                        cfg.hash())


def _bounded(path):
    net, Z = load_checkpoint(path)
    if Z is None:
        raise ValueError(f"{path} carries no bounds; run 'mitigate' first")
    return net, Z


def cmd_defend(args, cfg) -> None:
    net, Z = _bounded(args.model)
    null = mmdf.fit_null(net, Z, _clean(args.clean, cfg), cfg.theta)
    verdicts = mmdf.defend_batch(net, Z, null, _dataset(args.data, cfg).X)
    mmdf.write_verdicts(args.out, verdicts, config_hash=cfg.hash())


def cmd_margins(args, cfg) -> None:
    net, Z = load_checkpoint(args.model)
    acfg = AscentConfig(steps=args.steps, restarts=args.restarts, seed=_seed(args, cfg))
    rows = []
    for c in range(net.num_classes):
        for e in sorted(estimate_class_margins(net, Z, c, cfg=acfg), key=lambda e: e.restart):
            rows.append((c, e.restart, e.margin, int(e.converged)))
    cfgio.write_csv(args.out, ("class", "restart", "margin", "converged"), rows, cfg.hash())


def cmd_diagnose(args, cfg) -> None:
    net, Z = load_checkpoint(args.model)
    trig = harness.make_trigger(cfg)
    train_ds = _dataset(args.train_data, cfg)
    test = _dataset(args.test, cfg)
    tau = margin_floor(net, train_ds.X, train_ds.y)
    src = test.subset(np.flatnonzero(test.y != cfg.target))
    delta = harness._trigger_delta(trig, src.X)
    rows = [("tau", "", tau)]
    for s in np.unique(src.y):
        sel = src.y == s
        stat = directional_overfit_stat(net, delta[sel], src.X[sel], int(s), cfg.target)
        rows.append(("overfit_fraction", int(s), float(np.mean(stat > 2 * tau))))
        rows.append(("stat_mean", int(s), float(stat.mean())))
        if Z is not None:
            rows.append(("stat_mean_bounded", int(s),
                         float(directional_overfit_stat(net, delta[sel], src.X[sel], int(s), cfg.target, Z).mean())))
    if Z is not None and args.clean:
        rep = logit_preservation_report(net, Z, _clean(args.clean, cfg).X)
        rows += [("logit_mse", c, float(v)) for c, v in enumerate(rep["mse"])]
        rows += [("grad_ratio", c, float(v)) for c, v in enumerate(rep["grad_ratio"])]
    cfgio.write_csv(args.out, ("quantity", "class", "value"), rows, cfg.hash())


def cmd_experiment(args, cfg) -> None:
    root = harness.run_experiment(cfg)
    print((root / "summary.txt").read_text(), end="")


def cmd_report(args, cfg) -> None:
    out = harness.report([Path(r) for r in args.runs], args.out)
    print((out / "summary.txt").read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data, "poison": cmd_poison, "train": cmd_train, "mitigate": cmd_mitigate,
    "defend": cmd_defend, "margins": cmd_margins, "diagnose": cmd_diagnose, "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:         # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        if args.verb == "experiment" and args.out:
            overrides["out_dir"] = args.out
        cfg = harness.load_config(args.config, overrides)
    except (cfgio.ConfigError, ValueError) as exc:
        print(f"mmclip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.verb](args, cfg)
    except harness.StageError as exc:
        print(f"mmclip: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (CheckpointError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"mmclip: stage {args.verb!r} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
