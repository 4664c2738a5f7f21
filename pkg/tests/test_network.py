import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmclip.engine import ShapeError
from mmclip.network import (EPS_Z, LARGE, BoundVectors, LayerSpec, Network, bounded_forward, clip_activations,
                            cnn_s, forward, init_bounds, mlp, mlp3)

from conftest import pinned_mlp


def scalar_forward(net, x, z=None):
    """Loop-by-loop forward of a dense-only network; clipping via min() when ``z`` is given."""
    h = [float(v) for v in x]
    bi = 0
    for spec, p in zip(net.layers, net.params):
        W, b = p["W"], p["b"]
        out = []
        for j in range(spec.out_size):
            acc = float(b[j])
            for i in range(spec.in_size):
                acc += h[i] * float(W[i, j])
            if spec.activation == "relu":
                acc = max(acc, 0.0)
            if spec.clippable and z is not None:
                acc = min(acc, float(z[bi][j]))
            out.append(acc)
        if spec.clippable:
            bi += 1
        h = out
    return np.array(h)


def test_single_dense_layer_picks_weight_row():
    W = np.arange(6.0).reshape(2, 3)
    net = Network((LayerSpec("dense", 2, 3),), ({"W": W, "b": np.zeros(3)},), (2,), 3)
    np.testing.assert_array_equal(forward(net, np.array([1.0, 0.0])), W[0])


def test_pinned_mlp_matches_scalar_oracle(net2):
    rng = np.random.default_rng(0)
    for x in rng.uniform(size=(10, 2)):
        np.testing.assert_allclose(forward(net2, x), scalar_forward(net2, x), atol=1e-12)


def test_pinned_mlp_with_bounds_matches_scalar_oracle(net2):
    Z = BoundVectors((np.array([0.5, 0.2, 1.0, 0.05]),))
    rng = np.random.default_rng(1)
    for x in rng.uniform(size=(10, 2)):
        np.testing.assert_allclose(bounded_forward(net2, Z, x), scalar_forward(net2, x, Z.z), atol=1e-12)


def test_clipped_neuron_contributes_its_bound():
    layers = (LayerSpec("dense", 1, 1, activation="relu", clippable=True), LayerSpec("dense", 1, 1))
    net = Network(layers, ({"W": np.array([[2.0]]), "b": np.zeros(1)}, {"W": np.ones((1, 1)), "b": np.zeros(1)}),
                  (1,), 1)
    assert bounded_forward(net, BoundVectors((np.array([0.5]),)), np.array([1.0]))[0] == 0.5


def test_bounds_above_every_activation_are_exact_identity(net2):
    X = np.random.default_rng(2).uniform(size=(50, 2))
    Z = BoundVectors((clip_activations(net2, X)[0].max(axis=0) + 1.0,))
    assert np.array_equal(bounded_forward(net2, Z, X), forward(net2, X))


def test_infinite_beta_is_identity_on_many_inputs():
    net = mlp3(8, 4, seed=3)
    X = np.random.default_rng(3).uniform(size=(1000, 8))
    Z = init_bounds(net, X[:20], beta=np.inf)
    assert all(np.all(v == LARGE) for v in Z)
    assert np.array_equal(bounded_forward(net, Z, X), forward(net, X))


def test_init_bounds_is_beta_times_observed_maximum(net2):
    X = np.random.default_rng(4).uniform(size=(30, 2))
    Z = init_bounds(net2, X, beta=2.0)
    h = np.maximum(X @ net2.params[0]["W"] + net2.params[0]["b"], 0.0)
    np.testing.assert_allclose(Z.z[0], np.maximum(2.0 * h.max(axis=0), EPS_Z), rtol=1e-12)


def test_dead_channel_bound_is_floored():
    net = pinned_mlp()
    p0 = dict(net.params[0])
    p0["b"] = np.array([0.1, 0.0, 0.4, -10.0])      # neuron 3 never fires on [0, 1]^2
    net = net.with_params((p0, net.params[1]))
    Z = init_bounds(net, np.random.default_rng(5).uniform(size=(20, 2)))
    assert Z.z[0][3] == EPS_Z


def test_conv_bounds_are_per_channel():
    net = cnn_s((1, 8, 8), 3, channels=(2, 4), hidden=5, seed=0)
    assert net.clip_sizes() == [2, 4, 5]
    Z = init_bounds(net, np.random.default_rng(6).uniform(size=(4, 1, 8, 8)))
    assert [len(v) for v in Z] == [2, 4, 5]


def test_conv_bounded_forward_clips_whole_channel():
    net = cnn_s((1, 8, 8), 3, channels=(2, 4), hidden=5, seed=0)
    X = np.random.default_rng(7).uniform(size=(3, 1, 8, 8))
    Z = init_bounds(net, X, beta=1.0)
    acts = clip_activations(net, X, Z)
    for a, z in zip(acts, Z):
        zb = z.reshape((1, -1) + (1,) * (a.ndim - 2))
        assert np.all(a <= zb)


def test_bound_mismatch_is_rejected(net2):
    with pytest.raises(ShapeError):
        bounded_forward(net2, BoundVectors((np.ones(3),)), np.zeros(2))
    with pytest.raises(ShapeError):
        bounded_forward(net2, BoundVectors((np.ones(4), np.ones(4))), np.zeros(2))


def test_init_bounds_rejects_bad_arguments(net2):
    with pytest.raises(ValueError):
        init_bounds(net2, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        init_bounds(net2, np.zeros((3, 2)), beta=0.5)


def test_network_construction_checks_shapes():
    with pytest.raises(ShapeError):
        Network((LayerSpec("dense", 2, 3),), ({"W": np.zeros((3, 2)), "b": np.zeros(3)},), (2,), 3)
    with pytest.raises(ShapeError):
        Network((LayerSpec("dense", 2, 3),), ({"W": np.zeros((2, 3)), "b": np.zeros(3)},), (2,), 4)
    with pytest.raises(ValueError):
        Network((LayerSpec("dense", 2, 3, activation="relu"),), ({"W": np.zeros((2, 3)), "b": np.zeros(3)},), (2,), 3)
    with pytest.raises(ValueError):
        LayerSpec("lstm")


def test_input_shape_mismatch_is_rejected(net2):
    with pytest.raises(ShapeError):
        forward(net2, np.zeros((4, 3)))


def test_bound_vectors_floor_and_flat_round_trip():
    Z = BoundVectors((np.array([0.0, 2.0]), np.array([-1.0, 5.0, 1e-6])))
    np.testing.assert_array_equal(Z.z[0], [EPS_Z, 2.0])
    back = BoundVectors.from_flat(Z.to_flat(), [2, 3])
    for a, b in zip(Z, back):
        np.testing.assert_array_equal(a, b)


def test_presets_build_expected_shapes():
    assert mlp3(64, 10).clip_sizes() == [128, 64]
    assert mlp(5, 2, hidden=(7,)).clip_sizes() == [7]
    assert forward(cnn_s((1, 16, 16), 10), np.zeros((2, 1, 16, 16))).shape == (2, 10)


def test_preset_initialization_is_seeded():
    a, b, c = mlp3(6, 3, seed=1), mlp3(6, 3, seed=1), mlp3(6, 3, seed=2)
    assert all(np.array_equal(p, q) for p, q in zip(a.flat_params(), b.flat_params()))
    assert not np.array_equal(a.flat_params()[0], c.flat_params()[0])


bounds_strategy = arrays(np.float64, (4,), elements=st.floats(1e-3, 5.0))
inputs_strategy = arrays(np.float64, (6, 2), elements=st.floats(0.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(bounds_strategy, st.floats(0.0, 1.0), inputs_strategy)
def test_hidden_activations_monotone_in_bounds(z, frac, X):
    net = pinned_mlp()
    hi = clip_activations(net, X, BoundVectors((z,)))[0]
    lo = clip_activations(net, X, BoundVectors((z * frac,)))[0]
    assert np.all(lo <= hi)


@settings(max_examples=40, deadline=None)
@given(inputs_strategy, st.floats(-10.0, 10.0))
def test_shifting_final_bias_keeps_argmax(X, shift):
    net = pinned_mlp()
    p1 = dict(net.params[1])
    p1["b"] = p1["b"] + shift
    moved = net.with_params((net.params[0], p1))
    np.testing.assert_allclose(forward(moved, X) - forward(net, X), shift, atol=1e-9)
