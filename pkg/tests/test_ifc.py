import math

import numpy as np
import pytest

from ifcode import autodiff as ad
from ifcode.ifc import (IfcOde2Model, SfModel, gaussian_nll, matched_sf_hidden,
                        mlp_param_count, pca_warm_start)
from ifcode.nn import mlp_widths
from ifcode.pdegen import Split

rng = np.random.default_rng(0)
X = rng.uniform(size=(4, 3))


def toy_split():
    r = np.random.default_rng(1)
    return Split(X, np.array([0.0, 0.0, 1.0, 1.0]), r.normal(size=(4, 9)),
                 np.array([8, 8, 16, 16]))


def model(**kw):
    mod = IfcOde2Model(3, 9, 2, hidden=6, seed=0, zero_init_output=False, **kw)
    mod.nu = np.random.default_rng(2).normal(size=(9, 2))
    return mod


def zero_out(net):
    net.weights = [np.zeros_like(w) for w in net.weights]
    net.biases = [np.zeros_like(b) for b in net.biases]


def test_shapes_and_widths():
    mod = model()
    assert mod.phi.widths == [1 + 2 + 3, 6, 6, 2]
    assert mod.beta.widths == [3, 6, 6, 2]
    assert mod.gamma.widths == [2, 6, 6, 1]
    assert mod.basis_at(0.7).shape == (9, 2)
    assert mod.predict(X, 0.4).shape == (4, 9)
    assert math.exp(float(mod.log_sigma2)) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        IfcOde2Model(3, 9, 2, nu=np.zeros((2, 9)))


def test_zero_init_output_starts_at_rest():
    mod = IfcOde2Model(3, 9, 2, hidden=6, seed=0)
    mod.nu = np.random.default_rng(2).normal(size=(9, 2))
    assert np.array_equal(mod.latent_h(X, 1.3), mod.latent_h(X, 0.0))
    assert np.array_equal(mod.basis_at(1.3), mod.nu)


def test_m_zero_is_exact():
    mod = model()
    assert np.array_equal(mod.latent_h(X, 0.0), mod.beta(X))
    assert np.array_equal(mod.basis_at(0.0), mod.nu)


def test_zero_dynamics():
    mod = model()
    zero_out(mod.phi)
    zero_out(mod.gamma)
    for m in (0.3, 1.0, 2.14):
        assert np.array_equal(mod.latent_h(X, m), mod.beta(X))
        assert np.array_equal(mod.basis_at(m), mod.nu)
        assert np.allclose(mod.predict(X, m), mod.beta(X) @ mod.nu.T, atol=1e-14)


def test_identity_hooks():
    mod = model()
    mod.latent_dynamics = lambda m, h, x: h
    mod.basis_dynamics = lambda m, b, _: b
    assert np.max(np.abs(mod.latent_h(X, 1.0, steps=100) - math.e * mod.beta(X))) < 1e-8
    mod.nu = np.ones((9, 2))
    assert np.max(np.abs(mod.basis_at(0.6, steps=100) - math.exp(0.6))) < 1e-8
    pred = mod.predict(X, 1.0, steps=100)
    assert np.max(np.abs(pred - math.e**2 * mod.beta(X) @ mod.nu.T)) < 1e-6


def test_rank_one_product():
    mod = IfcOde2Model(2, 5, 1, hidden=4, seed=0, nu=np.ones((5, 1)))
    zero_out(mod.beta)
    mod.beta.biases[-1][:] = 2.0
    assert np.array_equal(mod.predict(np.zeros((1, 2)), 0.0), np.full((1, 5), 2.0))


def test_negative_fidelity_rejected():
    with pytest.raises(ValueError):
        model().predict(X, -0.1)


def test_continuity_in_m():
    mod = model()
    base = mod.predict(X, 0.5, steps=50)
    d3 = np.linalg.norm(mod.predict(X, 0.501, steps=50) - base)
    d4 = np.linalg.norm(mod.predict(X, 0.5001, steps=50) - base)
    assert 7 < d3 / d4 < 13


def test_gaussian_nll_values():
    assert gaussian_nll(0.0, 1, math.log(1 / (2 * math.pi))) == pytest.approx(0.0, abs=1e-15)
    assert gaussian_nll(1.0, 1, 0.0) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5)
    assert 0.5 * math.log(2 * math.pi) + 0.5 == pytest.approx(1.4189385, abs=1e-7)


def test_loss_formula_and_sigma_mle():
    mod, split = model(), toy_split()
    p = mod.params()
    resid = split.Y.copy()
    for m in (0.0, 1.0):
        idx = split.m == m
        resid[idx] -= mod.predict(split.X[idx], m)
    sse, n = float(np.sum(resid**2)), resid.size
    assert float(mod.loss(p, split)) == pytest.approx(gaussian_nll(sse, n, float(p["log_sigma2"])))
    mse = sse / n
    losses = [float(mod.loss({**p, "log_sigma2": np.array(math.log(v))}, split))
              for v in (0.01, mse / 2, mse)]
    assert losses[0] > losses[1] > losses[2]
    with pytest.raises(ValueError):
        mod.loss(p, split.subset([]))


def test_loss_gradient_matches_fd():
    mod, split = model(), toy_split()
    assert ad.grad_check_params(lambda p: mod.loss(p, split), mod.params()) < 1e-4


def test_params_round_trip():
    a, b = model(), IfcOde2Model(3, 9, 2, hidden=6, seed=5)
    b.set_params(a.params())
    assert np.array_equal(a.predict(X, 0.8), b.predict(X, 0.8))


def test_sf_model():
    sf = SfModel(3, 9, 2, hidden=5, seed=1, b0=np.random.default_rng(3).normal(size=(9, 2)))
    assert np.array_equal(sf.predict(X, 0.0), sf.predict(X, 1.7))
    split = toy_split()
    assert ad.grad_check_params(lambda p: sf.loss(p, split), sf.params()) < 1e-4


def test_matched_sf_hidden():
    w = matched_sf_hidden(5, 256, 10, 40)
    ifc = sum(mlp_param_count(mlp_widths(a, b, 40)) for a, b in ((16, 10), (5, 10), (2, 1)))
    assert abs(mlp_param_count(mlp_widths(5, 10, w)) - ifc) <= \
        abs(mlp_param_count(mlp_widths(5, 10, w + 1)) - ifc)


def test_pca_warm_start():
    Y = np.random.default_rng(4).normal(size=(20, 6))
    nu = pca_warm_start(Y, 3)
    _, S, Vt = np.linalg.svd(Y, full_matrices=False)
    assert np.allclose(nu, Vt[:3].T * S[:3] / math.sqrt(20))
    assert pca_warm_start(Y[:2], 4)[:, 2:].max() == 0.0


def test_dopri5_prediction_agrees_with_rk4():
    mod = model()
    rk4 = mod.predict(X, 1.3, steps=200)
    adaptive = mod.predict(X, 1.3, solver="dopri5")
    assert np.max(np.abs(rk4 - adaptive)) < 1e-5 * np.max(np.abs(rk4))
    with pytest.raises(ValueError):
        mod.predict(X, 0.5, solver="euler")
