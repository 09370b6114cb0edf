"""GP regression, PCA-GP and deep residual coregionalization (DRC) baselines."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .linalg import NotPositiveDefinite, cho_solve, safe_cholesky
from .trainer import AdamState, adam_step

LOG_2PI = math.log(2.0 * math.pi)


def _sq_dists(A, B):
    return np.maximum(np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T, 0.0)


class GpRegressor:
    """Single-output GP with an SE kernel (one lengthscale for all inputs).

    Inputs and targets are standardized internally; hyperparameters live in
    log space and refer to the standardized problem.
    """

    def __init__(self, X, y, log_lengthscale=0.0, log_variance=0.0, log_noise=math.log(1e-2),
                 jitter=1e-8):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(X) != len(y):
            raise ValueError("inputs and targets differ in length")
        if len(y) < 2:
            raise ValueError("need at least two examples")
        self.x_mean = X.mean(0)
        sd = X.std(0)
        self.x_scale = np.where(sd > 0, sd, 1.0)
        self.y_mean = float(y.mean())
        ysd = float(y.std())
        self.y_scale = ysd if ysd > 0 else 1.0
        self.X = (X - self.x_mean) / self.x_scale
        self.y = (y - self.y_mean) / self.y_scale
        self.hyp = {"log_lengthscale": np.array(float(log_lengthscale)),
                    "log_variance": np.array(float(log_variance)),
                    "log_noise": np.array(float(log_noise))}
        self.jitter = jitter
        self.history = []
        self._d2 = _sq_dists(self.X, self.X)
        self._refresh()

    def _kernel(self, hyp, d2):
        return ad.mul(ad.exp(hyp["log_variance"]),
                      ad.exp(ad.mul(-0.5 * d2, ad.exp(ad.mul(-2.0, hyp["log_lengthscale"])))))

    def _cov(self, hyp):
        n = len(self.y)
        noise = ad.exp(hyp["log_noise"])
        C = ad.add(self._kernel(hyp, self._d2), ad.mul(noise, np.eye(n)))
        # pick a jitter that factorizes, then keep it inside the graph
        _, jit = safe_cholesky(ad.value(C), jitter=self.jitter)
        return ad.add(C, jit * np.eye(n))

    def _nlml(self, hyp):
        C = self._cov(hyp)
        alpha = ad.solve(C, self.y)
        n = len(self.y)
        return ad.add(0.5 * n * LOG_2PI,
                      ad.mul(0.5, ad.add(ad.dot(self.y, alpha), ad.logdet(C))))

    def nlml(self):
        """Negative log marginal likelihood (standardized targets)."""
        return float(ad.value(self._nlml(self.hyp)))

    def _refresh(self):
        C = ad.value(self._cov(self.hyp))
        self._L = np.linalg.cholesky(C)
        self._alpha = cho_solve(self._L, self.y)

    def fit(self, iters=200, lr=0.05):
        """Adam on the NLML; keeps the best iterate, so NLML never increases."""
        state = AdamState(lr=lr)
        hyp = dict(self.hyp)
        best, best_hyp = None, dict(hyp)
        for _ in range(iters + 1):
            tape = ad.Tape()
            leaves = {k: tape.var(v) for k, v in hyp.items()}
            try:
                val = self._nlml(leaves)
            except (NotPositiveDefinite, np.linalg.LinAlgError):
                break
            f = float(val.value)
            self.history.append(f)
            if not np.isfinite(f):
                break
            if best is None or f < best:
                best, best_hyp = f, dict(hyp)
            if len(self.history) > iters:
                break
            g = ad.backward(tape, val)
            hyp = adam_step(state, hyp, {k: g[v.id] for k, v in leaves.items()})
        self.hyp = best_hyp
        self._refresh()
        return self

    def predict(self, Xs, return_var=False):
        Xs = (np.atleast_2d(np.asarray(Xs, dtype=np.float64)) - self.x_mean) / self.x_scale
        Ks = ad.value(self._kernel(self.hyp, _sq_dists(Xs, self.X)))
        mean = Ks @ self._alpha * self.y_scale + self.y_mean
        if not return_var:
            return mean
        v = np.linalg.solve(self._L, Ks.T)
        var = math.exp(float(self.hyp["log_variance"])) - np.sum(v * v, 0)
        return mean, np.maximum(var, 0.0) * self.y_scale**2

    def state(self, prefix=""):
        out = {f"{prefix}{k}": v for k, v in self.hyp.items()}
        out.update({f"{prefix}X": self.X * self.x_scale + self.x_mean,
                    f"{prefix}y": self.y * self.y_scale + self.y_mean})
        return out

    @classmethod
    def from_state(cls, state, prefix=""):
        gp = cls(state[f"{prefix}X"], state[f"{prefix}y"],
                 float(state[f"{prefix}log_lengthscale"]), float(state[f"{prefix}log_variance"]),
                 float(state[f"{prefix}log_noise"]))
        return gp


def gp_fit(inputs, targets, iters=200, lr=0.05, **kw):
    return GpRegressor(inputs, targets, **kw).fit(iters, lr)


class PcaGpModel:
    """Centered truncated-SVD basis with one GP per score coordinate."""

    def __init__(self, mean, basis, gps, explained_variance_ratio=None):
        self.mean = mean
        self.basis = basis
        self.gps = gps
        self.explained_variance_ratio = explained_variance_ratio

    @property
    def K(self):
        return self.basis.shape[1]

    @classmethod
    def fit(cls, X, Y, K, iters=200, lr=0.05):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.asarray(Y, dtype=np.float64)
        n, d = Y.shape
        if not 1 <= K <= min(n, d):
            raise ValueError(f"rank K={K} exceeds min(N, d)={min(n, d)}")
        mean = Y.mean(0)
        _, S, Vt = np.linalg.svd(Y - mean, full_matrices=False)
        basis = Vt[:K].T.copy()
        scores = (Y - mean) @ basis
        total = float(np.sum(S**2))
        ratio = float(np.sum(S[:K] ** 2) / total) if total > 0 else 1.0
        gps = [gp_fit(X, scores[:, k], iters, lr) for k in range(K)]
        return cls(mean, basis, gps, ratio)

    def scores(self, X):
        return np.stack([gp.predict(X) for gp in self.gps], axis=1)

    def predict(self, X, m=None, solver=None):
        # fidelity is ignored; accepted for interface parity with the ODE models
        return self.mean + self.scores(X) @ self.basis.T

    def state(self, prefix=""):
        out = {f"{prefix}mean": self.mean, f"{prefix}basis": self.basis}
        for k, gp in enumerate(self.gps):
            out.update(gp.state(f"{prefix}gp{k}."))
        return out

    @classmethod
    def from_state(cls, state, prefix=""):
        basis = np.asarray(state[f"{prefix}basis"])
        gps = [GpRegressor.from_state(state, f"{prefix}gp{k}.") for k in range(basis.shape[1])]
        return cls(np.asarray(state[f"{prefix}mean"]), basis, gps)


def pca_gp_fit(X, Y, K, iters=200, lr=0.05):
    return PcaGpModel.fit(X, Y, K, iters, lr)


def pca_gp_predict(model: PcaGpModel, x):
    return model.predict(x)


class DrcModel:
    """Sum of PCA-GP models, each fitted to the residual of the ones below it."""

    def __init__(self, levels, residuals=None):
        self.levels = levels
        self.residuals = residuals or []

    def predict(self, X, m=None, solver=None):
        return sum(level.predict(X) for level in self.levels)


def drc_fit(per_fidelity, K, iters=200, lr=0.05):
    """``per_fidelity`` is a list of (X_m, Y_m) ordered from low to high fidelity.

    Levels with fewer examples than K use rank N_m.
    """
    levels, residuals = [], []
    for X, Y in per_fidelity:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.asarray(Y, dtype=np.float64)
        R = Y - sum(level.predict(X) for level in levels) if levels else Y.copy()
        residuals.append(R)
        levels.append(PcaGpModel.fit(X, R, min(K, len(Y)), iters, lr))
    return DrcModel(levels, residuals)


def drc_predict(model: DrcModel, x):
    return model.predict(x)
