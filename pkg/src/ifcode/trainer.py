"""Full-batch training: Adam, reduce-on-plateau, metrics and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .odeint import NonFiniteState


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class AllZeroTruth(ValueError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} != parameter shape {np.shape(p)} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 100
    min_lr: float = 1e-5
    threshold: float = 1e-6
    best: float = float("inf")
    wait: int = 0


def scheduler_step(s: PlateauScheduler, loss: float) -> float:
    if not np.isfinite(loss):
        raise ValueError("loss must be finite")
    if loss < s.best - s.threshold:
        s.best = loss
        s.wait = 0
    else:
        s.wait += 1
        if s.wait > s.patience:
            s.lr = max(s.min_lr, s.lr * s.factor)
            s.wait = 0
    return s.lr


def nrmse(pred, truth):
    """RMS error over all entries divided by the RMS of the truth."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = np.sqrt(np.mean(truth**2))
    if denom == 0:
        raise AllZeroTruth("truth is identically zero")
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / denom)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 300
    seed: int = 0
    patience: int = 100
    factor: float = 0.5
    min_lr: float = 1e-5
    val_every: int = 0

    def validate(self):
        if not 1e-3 <= self.lr <= 1e-2:
            raise ValueError(f"lr {self.lr} outside [1e-3, 1e-2]")
        if not 0 <= self.epochs <= 5000:
            raise ValueError(f"epochs {self.epochs} outside [0, 5000]")
        if self.patience < 0 or not 0 < self.factor < 1 or self.min_lr <= 0:
            raise ValueError("invalid scheduler settings")

    def hash(self):
        return config_hash(asdict(self))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, loss, lr, val_nrmse or None)
    test_nrmse: float | None = None
    wall_time: float = 0.0
    seed: int = 0
    config_hash: str = ""
    normalizer: str = "rms_truth"
    status: str = "ok"

    def add(self, loss, lr, val=None):
        self.rows.append((len(self.rows) + 1, float(loss), float(lr), val))

    @property
    def losses(self):
        return [r[1] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "val_nrmse"])
        for epoch, loss, lr, val in self.rows:
            w.writerow([epoch, repr(loss), repr(lr), "" if val is None else repr(float(val))])
        return buf.getvalue()

    def final_metrics(self):
        return {
            "epochs": len(self.rows),
            "final_loss": self.rows[-1][1] if self.rows else None,
            "test_nrmse": self.test_nrmse,
            "wall_time": self.wall_time,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "nrmse_normalizer": self.normalizer,
            "status": self.status,
        }

    def save(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w") as fh:
            json.dump(self.final_metrics(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def loss_and_grad(model, params, data):
    tape = ad.Tape()
    leaves = {k: tape.var(v) for k, v in params.items()}
    loss = model.loss(leaves, data)
    grads = ad.backward(tape, loss)
    return float(loss.value), {k: grads[v.id] for k, v in leaves.items()}


def evaluate(model, split, m=None, target_mesh=None):
    """nRMSE of model predictions on ``split``.

    Predictions live on the model's output mesh; they are bilinearly
    resampled when the split is stored at a different resolution.
    """
    from .pdegen import resample_rows

    m = float(split.m[0]) if m is None else m
    pred = np.asarray(ad.value(model.predict(split.X, m)))
    if pred.shape[1] != split.Y.shape[1]:
        target = target_mesh or int(round(np.sqrt(split.Y.shape[1])))
        pred = resample_rows(pred, target)
    return nrmse(pred, split.Y)


def fit(model, data, config: TrainConfig, val=None):
    """Train ``model`` on the ``data`` split with Adam + plateau schedule.

    Rows record the loss at the parameters entering each epoch. On a
    non-finite loss the model keeps the last finite parameters and
    NonFiniteLoss is raised with the partial report attached.
    """
    config.validate()
    t0 = time.perf_counter()
    report = TrainReport(seed=config.seed, config_hash=config.hash())
    adam = AdamState(lr=config.lr)
    sched = PlateauScheduler(lr=config.lr, factor=config.factor, patience=config.patience,
                             min_lr=config.min_lr)
    params = {k: np.array(v, dtype=np.float64) for k, v in model.params().items()}
    for epoch in range(1, config.epochs + 1):
        try:
            loss, grads = loss_and_grad(model, params, data)
        except (NonFiniteState, FloatingPointError, np.linalg.LinAlgError) as exc:
            loss, grads = float("nan"), None
            cause = exc
        else:
            cause = None
        if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
            model.set_params(params)
            report.status = "nonfinite"
            report.wall_time = time.perf_counter() - t0
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", report) from cause
        val_score = None
        if val is not None and config.val_every and epoch % config.val_every == 0:
            model.set_params(params)
            val_score = evaluate(model, val)
        report.add(loss, adam.lr, val_score)
        params = adam_step(adam, params, grads)
        adam.lr = scheduler_step(sched, loss)
    model.set_params(params)
    report.wall_time = time.perf_counter() - t0
    return report
