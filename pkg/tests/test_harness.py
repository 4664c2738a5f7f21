import math

import numpy as np
import pytest

from mmclip import config as cfgio
from mmclip import harness
from mmclip.data import Dataset, patch_trigger
from mmclip.network import LayerSpec, Network

TINY = dict(num_classes=3, shape=(8,), n0=60, clean_per_class=10, test_per_class=20, epochs=2, max_iter=3,
            min_iter=0, beta=1.0, seeds=(0, 1), lambdas=(0.0, 0.01))


def tiny(scenario, tmp_path, **kw):
    return harness.ExperimentConfig(scenario=scenario, out_dir=str(tmp_path / scenario), **{**TINY, **kw})


class Constant:
    def __init__(self, label):
        self.label = label

    def predict(self, X):
        return np.full(len(X), self.label)


class ReadsFeature:
    """Decides from feature 5, which the trigger below never touches."""

    def predict(self, X):
        return np.rint(X[:, 5] * 4).astype(int)


def labelled_test():
    y = np.repeat(np.arange(5), 4)
    X = np.full((20, 8), 0.5)
    X[:, 5] = y / 4
    return Dataset(X, y, 5)


def test_always_target_model():
    trig = patch_trigger((8,), size=2, position=0, target=1)
    m = harness.compute_attack_metrics(Constant(1), labelled_test(), trig)
    assert (m.asr, m.pacc, m.acc) == (100.0, 0.0, 20.0)


def test_trigger_ignoring_model():
    trig = patch_trigger((8,), size=2, position=0, target=1)
    m = harness.compute_attack_metrics(ReadsFeature(), labelled_test(), trig)
    assert (m.asr, m.pacc, m.acc) == (0.0, 100.0, 100.0)


def test_attack_metrics_match_hand_tally():
    # logits = x @ W with W picking features 0..4: the argmax feature is the decision
    W = np.zeros((8, 5))
    W[np.arange(5), np.arange(5)] = 1.0
    net = Network((LayerSpec("dense", 8, 5),), ({"W": W, "b": np.zeros(5)},), (8,), 5)
    rng = np.random.default_rng(0)
    test = Dataset(rng.uniform(0, 0.6, size=(20, 8)), np.repeat(np.arange(5), 4), 5)
    trig = patch_trigger((8,), size=1, position=2, target=2)     # writes 0 or 1 into feature 2
    trig = type(trig)(trig.kind, np.where(trig.mask, 1.0, 0.0), 2, trig.mask)
    asr = pacc = acc = 0
    src = 0
    for x, y in zip(test.X, test.y):
        acc += int(np.argmax(x[:5]) == y)
        if y != 2:
            xt = x.copy()
            xt[2] = 1.0
            src += 1
            asr += int(np.argmax(xt[:5]) == 2)
            pacc += int(np.argmax(xt[:5]) == y)
    m = harness.compute_attack_metrics(net, test, trig)
    assert m.asr == pytest.approx(100 * asr / src) and m.pacc == pytest.approx(100 * pacc / src)
    assert m.acc == pytest.approx(100 * acc / 20)
    assert m.asr == 100.0


def test_attack_metrics_need_balanced_clean_test():
    trig = patch_trigger((8,), size=2, position=0, target=1)
    ds = labelled_test()
    with pytest.raises(ValueError, match="balanced"):
        harness.compute_attack_metrics(Constant(1), ds.subset(np.arange(19)), trig)


def test_mean_std():
    assert harness.mean_std([2.0]) == (2.0, pytest.approx(math.nan, nan_ok=True))
    mean, std = harness.mean_std([1.0, 2.0, 4.0])
    assert mean == pytest.approx(7 / 3)
    assert std == pytest.approx(math.sqrt(((1 - 7 / 3) ** 2 + (2 - 7 / 3) ** 2 + (4 - 7 / 3) ** 2) / 2))


def test_config_validation():
    with pytest.raises(ValueError, match="scenario"):
        harness.ExperimentConfig(scenario="nope")
    with pytest.raises(ValueError):
        harness.ExperimentConfig(arch="cnn_s", shape=(64,))
    with pytest.raises(cfgio.ConfigError):
        harness.load_config(None, {"bogus": "1"})
    assert harness.ExperimentConfig().train_epochs == 60
    assert harness.ExperimentConfig(scenario="imbalance").train_epochs == 30


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("scenario = imbalance\nlam = 0.5\nseeds = 3,4\n")
    cfg = harness.load_config(p, {"lam": "0.25"})
    assert cfg.scenario == "imbalance" and cfg.lam == 0.25 and cfg.seeds == (3, 4)


def test_hash_ignores_output_location():
    a = harness.ExperimentConfig(out_dir="a", workers=1)
    b = harness.ExperimentConfig(out_dir="b", workers=4)
    assert a.hash() == b.hash() != harness.ExperimentConfig(lam=1.0).hash()


@pytest.mark.parametrize("scenario", harness.SCENARIOS)
def test_every_scenario_writes_metrics(tmp_path, scenario):
    cfg = tiny(scenario, tmp_path, seeds=(0,))
    root = harness.run_experiment(cfg)
    header, rows, digest = cfgio.read_csv(root / "seed_0" / "metrics.csv")
    assert header == list(harness.METRIC_HEADER) and rows and digest == cfg.hash()
    assert (root / "summary.csv").exists() and (root / "config.txt").exists()
    assert {r["scenario"] for r in rows} == {scenario}


def test_backdoor_outputs(tmp_path):
    root = harness.run_experiment(tiny("backdoor", tmp_path, seeds=(0,)))
    _, rows, _ = cfgio.read_csv(root / "seed_0" / "metrics.csv")
    got = {(r["model"], r["metric"]) for r in rows}
    for model in ("poisoned", "mmac", "mmdf"):
        assert {(model, "ASR"), (model, "ACC"), (model, "PACC")} <= got
    assert ("diagnostic", "overfit_fraction") in got and ("mmdf", "flags@0.005") in got
    for name in ("clean.ckpt", "poisoned.ckpt", "mmac.ckpt", "history_mmac.csv", "margins_mmac.csv",
                 "training_poisoned.csv", "per_class.csv", "run.log"):
        assert (root / "seed_0" / name).exists()


def test_report_aggregates_with_unbiased_std(tmp_path):
    root = harness.run_experiment(tiny("imbalance", tmp_path))
    _, rows, _ = cfgio.read_csv(root / "summary.csv")
    acc = [r for r in rows if r["model"] == "ce" and r["metric"] == "ACC"][0]
    per_seed = [float(r["value"]) for s in (0, 1)
                for r in cfgio.read_csv(root / f"seed_{s}" / "metrics.csv")[1]
                if r["model"] == "ce" and r["metric"] == "ACC"]
    assert int(acc["n"]) == 2
    assert float(acc["mean"]) == pytest.approx(np.mean(per_seed))
    assert float(acc["std"]) == pytest.approx(np.std(per_seed, ddof=1))


def test_single_run_report_passes_values_through(tmp_path):
    root = harness.run_experiment(tiny("balanced", tmp_path, seeds=(0,)))
    _, seed_rows, _ = cfgio.read_csv(root / "seed_0" / "metrics.csv")
    _, rows, _ = cfgio.read_csv(root / "summary.csv")
    for r in rows:
        match = [s for s in seed_rows if (s["model"], s["metric"]) == (r["model"], r["metric"])]
        assert float(r["mean"]) == float(match[0]["value"]) and r["std"] == "nan"


def test_report_rejects_mixed_scenarios_and_empty_dirs(tmp_path):
    a = harness.run_experiment(tiny("balanced", tmp_path, seeds=(0,)))
    b = harness.run_experiment(tiny("imbalance", tmp_path, seeds=(0,)))
    with pytest.raises(harness.ReportError, match="scenarios"):
        harness.report([a, b], tmp_path / "mixed")
    with pytest.raises(harness.ReportError):
        harness.report([tmp_path / "empty"])


def test_rerun_is_byte_identical(tmp_path):
    first = harness.run_experiment(tiny("imbalance", tmp_path / "one", seeds=(0,)))
    second = harness.run_experiment(tiny("imbalance", tmp_path / "two", seeds=(0,)))
    for name in ("metrics.csv", "per_class.csv", "history_mmom.csv", "ce.ckpt", "mmom.ckpt"):
        assert (first / "seed_0" / name).read_bytes() == (second / "seed_0" / name).read_bytes()


def test_stage_failure_is_reported(tmp_path):
    # beta = 2 leaves the clean set unclipped, so the defense's null is degenerate
    cfg = tiny("backdoor", tmp_path, seeds=(0,), beta=2.0, lam=0.0)
    with pytest.raises(harness.StageError, match="defend") as info:
        harness.run_experiment(cfg)
    assert info.value.seed == 0
    assert "defend" in (tmp_path / "backdoor" / "seed_0" / "failure.txt").read_text()
