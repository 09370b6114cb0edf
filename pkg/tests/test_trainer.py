import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifcode.ifc import IfcOde2Model, SfModel
from ifcode.pdegen import Split
from ifcode.trainer import (AdamState, AllZeroTruth, NonFiniteLoss, PlateauScheduler,
                            TrainConfig, adam_step, evaluate, fit, nrmse, scheduler_step)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(AdamState(lr=1e-2), p, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], p["w"])


def test_adam_first_step():
    out = adam_step(AdamState(lr=1e-3), {"t": np.array(0.0)}, {"t": np.array(1.0)})
    assert out["t"] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)


def test_adam_steady_state():
    state, p = AdamState(lr=1e-3), {"t": np.array(0.0)}
    for _ in range(200):
        new = adam_step(state, p, {"t": np.array(-3.0)})
        delta = float(new["t"] - p["t"])
        p = new
    assert delta == pytest.approx(1e-3, rel=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_scheduler_rules():
    s = PlateauScheduler(lr=1e-2, patience=3)
    for loss in (5.0, 4.0, 3.0, 2.0, 1.0):
        assert scheduler_step(s, loss) == 1e-2
    s = PlateauScheduler(lr=1e-2, patience=3)
    lrs = [scheduler_step(s, 4.0) for _ in range(5)]
    assert lrs == [1e-2, 1e-2, 1e-2, 1e-2, 5e-3]
    s = PlateauScheduler(lr=1e-5, patience=0, min_lr=1e-5)
    assert [scheduler_step(s, 1.0) for _ in range(4)] == [1e-5] * 4
    with pytest.raises(ValueError):
        scheduler_step(s, float("nan"))


def test_nrmse_values():
    t = np.array([[1.0, -1.0], [1.0, -1.0]])
    assert nrmse(t, t) == 0.0
    assert nrmse(np.zeros_like(t), t) == 1.0
    assert nrmse(t + 0.1, t) == pytest.approx(0.1)
    with pytest.raises(AllZeroTruth):
        nrmse(t, np.zeros_like(t))
    with pytest.raises(ValueError):
        nrmse(t[:1], t)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_nrmse_scale_equivariant(seed):
    rng = np.random.default_rng(seed)
    truth, e = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert nrmse(truth + 2 * e, truth) == pytest.approx(2 * nrmse(truth + e, truth), rel=1e-12)


def test_config_validation():
    for bad in (TrainConfig(lr=0.1), TrainConfig(lr=1e-4), TrainConfig(epochs=5001),
                TrainConfig(epochs=-1)):
        with pytest.raises(ValueError):
            bad.validate()
    assert TrainConfig().hash() == TrainConfig().hash() != TrainConfig(seed=1).hash()


def linear_toy():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(20, 2))
    Y = X @ rng.normal(size=(3, 2)).T
    return Split(X, np.zeros(20), Y, np.full(20, 8))


def test_fit_linear_toy():
    split = linear_toy()
    sf = SfModel(2, 3, 3, hidden=20, seed=0, b0=np.eye(3))
    mse0 = np.mean((sf.predict(split.X) - split.Y) ** 2)
    report = fit(sf, split, TrainConfig(lr=1e-2, epochs=50))
    assert [r[0] for r in report.rows] == list(range(1, 51))
    # the Gaussian NLL goes negative once sigma^2 shrinks
    assert report.losses[-1] < 1e-4 * report.losses[0]
    assert np.mean((sf.predict(split.X) - split.Y) ** 2) < 1e-2 * mse0
    lrs = [r[2] for r in report.rows]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_fit_is_deterministic(tmp_path):
    split = linear_toy()
    csvs = []
    for i in range(2):
        sf = SfModel(2, 3, 3, hidden=8, seed=4, b0=np.eye(3))
        report = fit(sf, split, TrainConfig(lr=5e-3, epochs=20, seed=4))
        report.save(tmp_path / f"r{i}.csv", tmp_path / f"r{i}.json")
        csvs.append((tmp_path / f"r{i}.csv").read_bytes())
    assert csvs[0] == csvs[1]
    meta = json.loads((tmp_path / "r0.json").read_text())
    assert meta["epochs"] == 20 and meta["nrmse_normalizer"] == "rms_truth"
    assert csvs[0].decode().splitlines()[0] == "epoch,loss,lr,val_nrmse"


def test_zero_epochs():
    split = linear_toy()
    sf = SfModel(2, 3, 3, hidden=8, seed=1, b0=np.eye(3))
    before = sf.params()
    report = fit(sf, split, TrainConfig(epochs=0))
    assert report.rows == [] and report.final_metrics()["final_loss"] is None
    for k, v in sf.params().items():
        assert np.array_equal(v, before[k])


def test_validation_column():
    split = linear_toy()
    sf = SfModel(2, 3, 3, hidden=8, seed=1, b0=np.eye(3))
    report = fit(sf, split, TrainConfig(epochs=4, val_every=2), val=split)
    assert [r[3] is None for r in report.rows] == [True, False, True, False]


def test_nonfinite_loss_keeps_last_good_params():
    split = linear_toy()
    sf = SfModel(2, 3, 3, hidden=8, seed=1, b0=np.eye(3))
    sf.log_sigma2 = np.array(-1e4)  # exp(1e4) overflows
    before = sf.params()
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteLoss) as err:
        fit(sf, split, TrainConfig(epochs=3))
    assert err.value.report.status == "nonfinite"
    for k, v in sf.params().items():
        assert np.array_equal(v, before[k])


def test_evaluate_resamples_to_split_mesh():
    rng = np.random.default_rng(2)
    mod = IfcOde2Model(2, 16, 2, hidden=4, seed=0, nu=rng.normal(size=(16, 2)))
    X = rng.uniform(size=(3, 2))
    from ifcode.pdegen import resample_rows
    truth = resample_rows(np.asarray(mod.predict(X, 1.0)), 7)
    split = Split(X, np.ones(3), truth, np.full(3, 7))
    assert evaluate(mod, split) < 1e-14
