import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from mmclip.data import (CleanSet, Dataset, ImbalanceSpec, TriggerSpec, apply_imbalance, chessboard_trigger,
                         embed_trigger, load_external, patch_trigger, poison, save_csv, save_raw,
                         split_clean_set, synth_classes)


def test_class_counts_balanced():
    ds = synth_classes(10, (8,), n_per_class=5000, seed=0)
    np.testing.assert_array_equal(ds.class_counts, np.full(10, 5000))


def test_samples_in_unit_box():
    ds = synth_classes(3, (2, 6, 6), n_per_class=40, seed=1)
    assert ds.X.shape == (120, 2, 6, 6)
    assert ds.X.min() >= 0 and ds.X.max() <= 1


def test_synthetic_data_is_deterministic():
    a = synth_classes(4, (16,), n_per_class=30, seed=3)
    b = synth_classes(4, (16,), n_per_class=30, seed=3)
    c = synth_classes(4, (16,), n_per_class=30, seed=4)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.X.tobytes() != c.X.tobytes()


def test_well_separated_classes_are_linearly_separable():
    train = synth_classes(10, (64,), separation=5.0, noise=0.3, n_per_class=200, seed=0)
    test = synth_classes(10, (64,), separation=5.0, noise=0.3, n_per_class=200, seed=1, prototypes_seed=0)
    probe = LogisticRegression(max_iter=2000).fit(train.X, train.y)
    assert probe.score(test.X, test.y) >= 0.99


def test_lt_counts_example():
    spec = ImbalanceSpec("LT", 100, 5000)
    counts = spec.counts(10)
    assert counts[0] == 5000 and counts[9] == 50
    assert spec.mu_e(10) == pytest.approx(100 ** (-1 / 9), rel=1e-15)
    # oracle: n_i = round(n0 * mu^i)
    np.testing.assert_array_equal(counts, [math.floor(5000 * 100 ** (-i / 9) + 0.5) for i in range(10)])
    assert ImbalanceSpec("LT", 100, 500).counts(10)[9] == 5


def test_step_counts_example():
    np.testing.assert_array_equal(ImbalanceSpec("step", 10, 5000).counts(10), [5000] * 5 + [500] * 5)


def test_gamma_one_keeps_everything():
    ds = synth_classes(4, (5,), n_per_class=20, seed=0)
    out = apply_imbalance(ds, ImbalanceSpec("LT", 1, 20), seed=1)
    assert out.X.tobytes() == ds.X.tobytes() and out.y.tobytes() == ds.y.tobytes()


def test_apply_imbalance_subsamples_and_rejects_shortfall():
    ds = synth_classes(10, (4,), n_per_class=500, seed=0)
    out = apply_imbalance(ds, ImbalanceSpec("LT", 100, 500), seed=0)
    np.testing.assert_array_equal(out.class_counts, ImbalanceSpec("LT", 100, 500).counts(10))
    assert out.class_counts.max() / out.class_counts.min() == 100
    with pytest.raises(ValueError, match="class 0"):
        apply_imbalance(ds, ImbalanceSpec("LT", 100, 501))
    with pytest.raises(ValueError):
        ImbalanceSpec("LT", 0.5)


def test_zero_additive_trigger_is_identity():
    x = np.random.default_rng(0).uniform(size=(3, 6))
    assert np.array_equal(embed_trigger(x, TriggerSpec("additive_global", np.zeros(6), 0)), x)


def test_full_mask_patch_replaces_image():
    x = np.random.default_rng(0).uniform(size=(1, 4, 4))
    spec = patch_trigger((1, 4, 4), size=4)
    np.testing.assert_array_equal(embed_trigger(x, spec), spec.pattern)


def test_chessboard_matches_elementwise_oracle():
    x = np.random.default_rng(1).uniform(size=(1, 5, 5))
    x[0, 0, 0], x[0, 0, 1] = 0.99, 0.01          # saturate at both ends
    out = embed_trigger(x, chessboard_trigger((1, 5, 5), 0.03))
    for i in range(5):
        for j in range(5):
            want = min(max(x[0, i, j] + 0.03 * (1 if (i + j) % 2 == 0 else -1), 0.0), 1.0)
            assert out[0, i, j] == want


def test_blend_trigger_mixes_inside_mask_only():
    spec = patch_trigger((8,), size=2, position=3, blend=0.25, seed=2)
    x = np.full(8, 0.4)
    out = embed_trigger(x, spec)
    np.testing.assert_allclose(out[3:5], 0.75 * 0.4 + 0.25 * spec.pattern[3:5])
    np.testing.assert_array_equal(np.delete(out, [3, 4]), 0.4)
    with pytest.raises(ValueError):
        patch_trigger((8,), size=3, position=7)


def test_trigger_geometry_mismatch():
    with pytest.raises(ValueError, match="geometry"):
        embed_trigger(np.zeros((2, 5)), chessboard_trigger((6,)))


def test_poison_bookkeeping():
    ds = synth_classes(5, (6,), n_per_class=100, seed=0)
    out = poison(ds, chessboard_trigger((6,), target=2), rate=0.02, seed=0)
    eligible = int(np.sum(ds.y != 2))
    assert out.poisoned.sum() == math.floor(0.02 * eligible + 0.5)
    assert np.all(out.y[out.poisoned] == 2) and np.all(ds.y[out.poisoned] != 2)
    np.testing.assert_array_equal(out.X[~out.poisoned], ds.X[~out.poisoned])
    with pytest.raises(ValueError):
        poison(ds, chessboard_trigger((6,)), rate=0.0)


@pytest.mark.parametrize("per_class", [50, 5])
def test_clean_split_sizes_and_disjointness(per_class):
    ds = synth_classes(10, (4,), n_per_class=80, seed=0)
    ds = Dataset(ds.X, ds.y, 10, np.arange(len(ds)) % 17 == 0)
    D, rest = split_clean_set(ds, per_class, seed=0)
    assert len(D) == per_class * 10 and len(rest) == len(ds) - per_class * 10
    assert isinstance(D, CleanSet) and not D.poisoned.any()
    seen = {x.tobytes() for x in rest.X}
    assert not any(x.tobytes() in seen for x in D.X)


def test_clean_set_must_be_balanced():
    with pytest.raises(ValueError, match="balanced"):
        CleanSet(np.zeros((3, 2)), np.array([0, 0, 1]), 2)


def test_csv_fixture_and_label_range(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0,f1\n0,0.1,0.2\n1,0.3,0.4\n1,0.5,0.6\n")
    ds = load_external(p, num_classes=2)
    assert len(ds) == 3 and ds.input_shape == (2,)
    p.write_text("label,f0,f1\n0,0.1,0.2\n2,0.3,0.4\n")
    with pytest.raises(ValueError, match="label"):
        load_external(p, num_classes=2)


@pytest.mark.parametrize("writer, name", [(save_csv, "d.csv"), (save_raw, "d.bin")])
def test_export_import_round_trip(tmp_path, writer, name):
    ds = synth_classes(3, (5,), n_per_class=7, seed=0)
    writer(ds, tmp_path / name)
    back = load_external(tmp_path / name, num_classes=3)
    assert back.X.tobytes() == ds.X.tobytes() and back.y.tobytes() == ds.y.tobytes()


def test_out_of_range_values_are_rescaled(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0\n0,-2\n1,2\n")
    np.testing.assert_array_equal(load_external(p).X[:, 0], [0.0, 1.0])


def test_raw_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" * 10)
    with pytest.raises(ValueError, match="MMDATA"):
        load_external(p)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 200.0), st.integers(2, 12), st.sampled_from(["LT", "step"]))
def test_imbalance_counts_are_non_increasing(gamma, classes, kind):
    counts = ImbalanceSpec(kind, gamma, 1000).counts(classes)
    assert np.all(np.diff(counts) <= 0)
    assert counts[0] == 1000 and counts[-1] == math.floor(1000 / gamma + 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 2**16))
def test_embedding_stays_in_unit_box(amplitude, seed):
    x = np.random.default_rng(seed).uniform(size=(4, 10))
    out = embed_trigger(x, chessboard_trigger((10,), amplitude))
    assert out.min() >= 0 and out.max() <= 1
