import numpy as np
import pytest

from mmclip.data import CleanSet, Dataset, ImbalanceSpec, apply_imbalance, split_clean_set, synth_classes
from mmclip.margin import margins
from mmclip.mitigation import (MarginPoints, MitigationAborted, MitigationConfig, loss_mmac, loss_mmom,
                               run_mitigation)
from mmclip.network import EPS_Z, BoundVectors, LayerSpec, Network, bounded_forward, init_bounds, mlp
from mmclip.training import TrainConfig, evaluate, train

from conftest import pinned_mlp


def clean_set(per_class=5, seed=0):
    rng = np.random.default_rng(seed)
    return CleanSet(rng.uniform(size=(3 * per_class, 2)), np.repeat(np.arange(3), per_class), 3)


def test_identity_bounds_and_zero_lambda_give_zero_mmac_loss(net2):
    D = clean_set()
    Z = init_bounds(net2, D.X, beta=2.0)
    assert loss_mmac(net2, Z, D, None, lam=0.0).total == 0.0


def test_mmac_loss_matches_hand_sum(net2):
    D = clean_set()
    Z = BoundVectors((np.array([0.3, 0.5, 0.2, 0.4]),))
    pts = MarginPoints(np.array([[0.1, 0.9], [0.5, 0.5], [0.9, 0.2]]), np.array([0, 1, 2]))
    parts = loss_mmac(net2, Z, D, pts, lam=0.25)
    f, fb = bounded_forward(net2, None, D.X), bounded_forward(net2, Z, D.X)
    mse = np.mean((fb - f) ** 2)
    mm = np.mean([margins(net2, Z, pts.X[i:i + 1], pts.classes[i])[0] for i in range(3)])
    assert parts.term1 == pytest.approx(mse, rel=1e-12)
    assert parts.term2 == pytest.approx(mm, rel=1e-12)
    assert parts.total == pytest.approx(mse + 0.25 * mm, rel=1e-12)


def test_mmom_loss_matches_cross_entropy_plus_margin(net2):
    D = clean_set(seed=1)
    Z = BoundVectors((np.array([0.3, 0.5, 0.2, 0.4]),))
    pts = MarginPoints(np.array([[0.2, 0.2], [0.8, 0.1]]), np.array([0, 1]))
    logits = bounded_forward(net2, Z, D.X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    ce = -np.mean(shifted[np.arange(len(D)), D.y] - np.log(np.exp(shifted).sum(axis=1)))
    mm = np.mean([margins(net2, Z, pts.X[i:i + 1], pts.classes[i])[0] for i in range(2)])
    parts = loss_mmom(net2, Z, D, pts, lam=0.5)
    assert parts.total == pytest.approx(ce + 0.5 * mm, rel=1e-12)
    assert loss_mmom(net2, Z, D, pts, lam=0.0).total == pytest.approx(ce, rel=1e-12)


def test_confident_correct_classifier_has_near_zero_mmom_loss():
    # logits 50 * x for one-hot x: correct with a huge margin, clipping inactive
    layers = (LayerSpec("dense", 3, 3, activation="relu", clippable=True), LayerSpec("dense", 3, 3))
    params = ({"W": np.eye(3), "b": np.zeros(3)}, {"W": 50 * np.eye(3), "b": np.zeros(3)})
    net = Network(layers, params, (3,), 3)
    D = CleanSet(np.eye(3), np.arange(3), 3)
    assert loss_mmom(net, init_bounds(net, D.X), D, None, lam=0.0).total < 1e-20


def test_zero_lambda_mmac_keeps_logits():
    net = mlp(6, 3, hidden=(12,), seed=0)
    D = CleanSet(np.random.default_rng(0).uniform(size=(30, 6)), np.repeat(np.arange(3), 10), 3)
    Z, hist = run_mitigation(net, D, MitigationConfig(lam=0.0, max_iter=30, min_iter=0), "mmac")
    mse = np.mean((bounded_forward(net, Z, D.X) - bounded_forward(net, None, D.X)) ** 2)
    assert mse < 1e-4
    assert hist[-1].term1 < 1e-4


def test_bounds_respect_floor_and_runs_are_deterministic():
    net = mlp(6, 3, hidden=(12,), seed=1)
    D = CleanSet(np.random.default_rng(1).uniform(size=(15, 6)), np.repeat(np.arange(3), 5), 3)
    cfg = MitigationConfig(lam=10.0, max_iter=40, min_iter=0, step=0.5)
    Z1, h1 = run_mitigation(net, D, cfg, "mmac")
    Z2, h2 = run_mitigation(net, D, cfg, "mmac")
    assert all(np.all(z >= EPS_Z) for z in Z1)
    assert Z1.to_flat().tobytes() == Z2.to_flat().tobytes()
    assert [h.loss for h in h1] == [h.loss for h in h2]


def test_history_records_terms_and_class_margins():
    net = mlp(4, 3, hidden=(8,), seed=2)
    D = CleanSet(np.random.default_rng(2).uniform(size=(9, 4)), np.repeat(np.arange(3), 3), 3)
    cfg = MitigationConfig(lam=0.1, max_iter=5, min_iter=0)
    _, hist = run_mitigation(net, D, cfg, "mmom")
    assert [h.iteration for h in hist] == list(range(len(hist)))
    for h in hist:
        assert h.loss == pytest.approx(h.term1 + 0.1 * h.term2, rel=1e-12)
        assert h.class_margins.shape == (3,)


def test_strong_penalty_lowers_the_margins():
    net = mlp(4, 3, hidden=(16,), seed=3)
    D = CleanSet(np.random.default_rng(3).uniform(size=(15, 4)), np.repeat(np.arange(3), 5), 3)
    # beta=1 puts the bounds at the clean maxima, so the ascent points are clipped from the start
    _, hist = run_mitigation(net, D, MitigationConfig(lam=1.0, max_iter=60, min_iter=0, beta=1.0), "mmac")
    assert hist[-1].term2 < hist[0].term2
    assert hist[-1].class_margins[2] < 0.7 * hist[0].class_margins[2]


def test_stop_rule_waits_for_min_iter():
    net = mlp(4, 3, hidden=(8,), seed=4)
    D = CleanSet(np.random.default_rng(4).uniform(size=(6, 4)), np.repeat(np.arange(3), 2), 3)
    _, hist = run_mitigation(net, D, MitigationConfig(lam=0.0, max_iter=50, min_iter=20, tol=1.0), "mmac")
    assert len(hist) == 21


def test_unbalanced_clean_set_and_bad_config_rejected(net2):
    D = Dataset(np.zeros((3, 2)), [0, 0, 1], 3)
    with pytest.raises(ValueError, match="balanced"):
        run_mitigation(net2, D)
    with pytest.raises(ValueError):
        run_mitigation(net2, clean_set(), objective="nope")
    with pytest.raises(ValueError):
        MitigationConfig(lam=-1.0)
    with pytest.raises(ValueError):
        MitigationConfig(optimizer="rmsprop")


def test_non_finite_loss_aborts_with_history():
    # margins well above 1 times lambda = 1e308 overflow the combined loss
    net = pinned_mlp()
    p1 = dict(net.params[1], W=100 * net.params[1]["W"])
    net = net.with_params((net.params[0], p1))
    with pytest.raises(MitigationAborted) as info:
        run_mitigation(net, clean_set(), MitigationConfig(lam=1e308, max_iter=3, min_iter=0))
    assert info.value.history == []


@pytest.mark.slow
def test_mmom_improves_rarest_class_on_imbalanced_fixture():
    full = synth_classes(10, (64,), separation=1.5, n_per_class=550, seed=0)
    D, pool = split_clean_set(full, 50, seed=0)
    ds = apply_imbalance(pool, ImbalanceSpec("LT", 100, 500), seed=0)
    test = synth_classes(10, (64,), separation=1.5, n_per_class=200, seed=10000, prototypes_seed=0)
    net, _ = train(mlp(64, 10, seed=0), ds, TrainConfig(epochs=30))
    Z, _ = run_mitigation(net, D, MitigationConfig(max_iter=150), "mmom")
    before, after = evaluate(net, test), evaluate((net, Z), test)
    assert after.per_class[9] > before.per_class[9]


@pytest.mark.slow
def test_mmac_halves_the_target_class_margin_on_poisoned_fixture():
    from mmclip import harness
    from mmclip.data import poison

    cfg = harness.ExperimentConfig(scenario="backdoor")
    pool, D, _ = harness.make_data(cfg, 0)
    trigger = harness.make_trigger(cfg)
    net, _ = train(harness.make_network(cfg, 0), poison(pool, trigger, cfg.poison_rate, seed=0), cfg.train_config(0))
    _, hist = run_mitigation(net, D, cfg.mitigation_config(0), "mmac")
    target = [h.class_margins[cfg.target] for h in hist]
    assert target[-1] < target[0]
    assert target[-1] < 0.5 * target[0]
