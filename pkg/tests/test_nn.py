import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifcode import autodiff as ad
from ifcode.nn import Mlp, mlp_widths


def test_zero_network_gives_zero():
    net = Mlp.init([3, 5, 5, 2], 0)
    net.weights = [np.zeros_like(w) for w in net.weights]
    assert np.array_equal(net(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.2, -1.0, 4.0])
    assert np.array_equal(net(x), x)


def test_hand_evaluated_network():
    net = Mlp([1, 2, 1], [np.array([[1.0], [-1.0]]), np.array([[0.5, 0.5]])],
              [np.zeros(2), np.zeros(1)])
    assert abs(net(np.array([0.3]))[0]) < 1e-15


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Mlp.init([3, 4, 1], 0)(np.ones(2))


@pytest.mark.parametrize("widths", [[3], [3, 0, 1], []])
def test_invalid_widths(widths):
    with pytest.raises(ValueError):
        Mlp.init(widths, 0)


def test_init_is_deterministic_and_bounded():
    a, b = Mlp.init([3, 10, 10, 5], 7), Mlp.init([3, 10, 10, 5], 7)
    for x, y in zip(a.param_arrays(), b.param_arrays()):
        assert np.array_equal(x, y)
    for W in a.weights:
        assert np.all(np.abs(W) <= np.sqrt(6.0 / sum(W.shape)))
    assert all(np.array_equal(bias, np.zeros_like(bias)) for bias in a.biases)


def test_parameter_count():
    assert Mlp.init([3, 10, 10, 5], 0).n_params == 205
    assert mlp_widths(4, 2) == [4, 40, 40, 2]


def test_batch_matches_single_rows():
    net = Mlp.init([3, 6, 6, 2], 1)
    X = np.random.default_rng(0).normal(size=(5, 3))
    batch = net(X)
    for i in range(5):
        assert np.allclose(batch[i], net(X[i]), atol=1e-15)


def test_serialization_round_trip():
    net = Mlp.init([2, 4, 4, 3], 11)
    back = Mlp.from_bytes(net.to_bytes())
    assert back.widths == net.widths and back.seed == 11
    for x, y in zip(net.param_arrays(), back.param_arrays()):
        assert np.array_equal(x, y)
    with pytest.raises(ValueError):
        Mlp.from_bytes(net.to_bytes()[:-8])


def test_gradient_wrt_input_and_params():
    net = Mlp.init([3, 5, 5, 2], 2)
    x = np.array([0.1, -0.4, 0.7])
    assert ad.grad_check(lambda v: ad.sum_(ad.square(net(v))), x) < 1e-7
    W0 = net.weights[0]

    def f(w):
        params = net.param_arrays()
        params[0] = w
        return ad.sum_(ad.square(net(x, params)))

    assert ad.grad_check(f, W0) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_hidden_activations_bounded(seed, x):
    net = Mlp.init([3, 8, 8, 2], seed)
    h = np.tanh(net.weights[0] @ np.array(x) + net.biases[0])
    assert np.all(np.abs(h) <= 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_lipschitz_bound(seed, pair_seed):
    net = Mlp.init([3, 8, 8, 2], seed)
    rng = np.random.default_rng(pair_seed)
    a, b = rng.normal(size=3), rng.normal(size=3)
    bound = np.prod([np.linalg.norm(W, 2) for W in net.weights])
    assert np.linalg.norm(net(a) - net(b)) <= bound * np.linalg.norm(a - b) * (1 + 1e-12)
