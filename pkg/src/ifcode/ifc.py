"""IFC-ODE^2 and its single-fidelity degeneration (SF).

The latent output follows dh/dm = phi(m, h, x) from h(0, x) = beta(x); each
basis element follows db/dm = gamma(b, m) from b(0) = nu with one shared
scalar network gamma. Prediction at fidelity m is B(m) h(m, x).
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .nn import DEFAULT_HIDDEN, Mlp, mlp_widths
from .odeint import STEPS_PER_UNIT, OdeProblem, dopri5_integrate, rk4_integrate, steps_for

LOG_2PI = math.log(2.0 * math.pi)


def pca_warm_start(Y, K):
    """Top-K right singular vectors scaled by singular value / sqrt(N).

    With this scaling the matching latent coordinates have unit RMS.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n, d = Y.shape
    _, S, Vt = np.linalg.svd(Y, full_matrices=False)
    k = min(K, len(S))
    out = np.zeros((d, K))
    out[:, :k] = Vt[:k].T * (S[:k] / math.sqrt(max(n, 1)))
    return out


def gaussian_nll(sse, n_values, log_sigma2):
    """-sum log N(r | 0, sigma^2) for residuals with squared norm ``sse``."""
    return 0.5 * n_values * (LOG_2PI + log_sigma2) + 0.5 * sse * ad.exp(-log_sigma2)


class _Model:
    """Shared parameter plumbing: a flat name -> array dict."""

    kind = ""
    steps_per_unit = STEPS_PER_UNIT

    def _integrate(self, rhs, y0, m, ctx, steps, solver, m0=0.0):
        """Integrate from m0 to m with differentiable RK4 or (plain arrays) DOPRI5."""
        prob = OdeProblem(rhs, y0, (m0, m), ctx)
        if solver == "rk4":
            steps = steps if steps is not None else steps_for(m - m0, self.steps_per_unit)
            return rk4_integrate(prob, steps)
        if solver == "dopri5":
            return dopri5_integrate(prob, rtol=1e-6, atol=1e-9)
        raise ValueError(f"unknown solver {solver!r}")

    def params(self):
        raise NotImplementedError

    def set_params(self, params):
        raise NotImplementedError

    @property
    def n_params(self):
        return sum(v.size for v in self.params().values())

    @staticmethod
    def _net_params(p, prefix, net):
        return [p[f"{prefix}.{n}{i}"] for i in range(len(net.weights)) for n in ("W", "b")]


class IfcOde2Model(_Model):
    kind = "ifc-ode2"

    def __init__(self, input_dim, d, K, hidden=DEFAULT_HIDDEN, seed=0,
                 steps_per_unit=STEPS_PER_UNIT, sigma2=0.01, nu=None, zero_init_output=True):
        seeds = np.random.SeedSequence(seed).generate_state(3)
        self.input_dim, self.d, self.K = int(input_dim), int(d), int(K)
        self.hidden = int(hidden)
        self.seed = seed
        self.steps_per_unit = steps_per_unit
        self.phi = Mlp.init(mlp_widths(1 + K + input_dim, K, hidden), int(seeds[0]))
        self.beta = Mlp.init(mlp_widths(input_dim, K, hidden), int(seeds[1]))
        self.gamma = Mlp.init(mlp_widths(2, 1, hidden), int(seeds[2]))
        if zero_init_output:
            # start both ODEs at rest so training begins from the warm-started basis
            self.phi.weights[-1][:] = 0.0
            self.gamma.weights[-1][:] = 0.0
        self.nu = np.zeros((d, K)) if nu is None else np.array(nu, dtype=np.float64)
        if self.nu.shape != (d, K):
            raise ValueError(f"nu must have shape {(d, K)}")
        self.log_sigma2 = np.array(math.log(sigma2))
        # test hooks: replace phi / gamma with fixed dynamics f(m, state, x)
        self.latent_dynamics = None
        self.basis_dynamics = None

    def params(self):
        out = {}
        out.update(self.phi.named_params("phi"))
        out.update(self.beta.named_params("beta"))
        out.update(self.gamma.named_params("gamma"))
        out["nu"] = self.nu
        out["log_sigma2"] = self.log_sigma2
        return out

    def set_params(self, params):
        self.phi.load_named(params, "phi")
        self.beta.load_named(params, "beta")
        self.gamma.load_named(params, "gamma")
        self.nu = np.asarray(params["nu"], dtype=np.float64)
        self.log_sigma2 = np.asarray(params["log_sigma2"], dtype=np.float64)

    def config(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "d": self.d, "K": self.K,
                "hidden": self.hidden, "seed": self.seed, "steps_per_unit": self.steps_per_unit}

    def latent_h(self, X, m, p=None, steps=None, solver="rk4"):
        """h(m, x) for a batch ``X`` of shape (n, input_dim) -> (n, K)."""
        p = self.params() if p is None else p
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        h0 = self.beta(X, self._net_params(p, "beta", self.beta))
        if m == 0:
            return h0
        if self.latent_dynamics is not None:
            rhs = self.latent_dynamics
        else:
            phi_p = self._net_params(p, "phi", self.phi)
            n = len(X)

            def rhs(v, h, x):
                return self.phi(ad.concat([np.full((n, 1), v), h, x], axis=1), phi_p)
        return self._integrate(rhs, h0, m, X, steps, solver)

    def basis_at(self, m, p=None, steps=None, solver="rk4"):
        """B(m) as a (d, K) matrix; one batched ODE over all d*K elements."""
        p = self.params() if p is None else p
        if m == 0:
            return p["nu"]
        return self._basis_step(p["nu"], 0.0, m, p, steps, solver)

    def _basis_step(self, B, m0, m1, p, steps, solver):
        if self.basis_dynamics is not None:
            rhs = self.basis_dynamics
        else:
            gamma_p = self._net_params(p, "gamma", self.gamma)

            def rhs(v, b, _):
                return self.gamma.pointwise(b, v, gamma_p)
        return self._integrate(rhs, B, m1, None, steps, solver, m0)

    def bases_at(self, ms, p=None, steps=None):
        """B at each fidelity of the ascending list ``ms``, integrating once
        through them (each segment gets its own RK4 step count)."""
        p = self.params() if p is None else p
        out, B, prev = [], p["nu"], 0.0
        for m in ms:
            if m < prev:
                raise ValueError("fidelities must be ascending")
            if m > prev:
                B = self._basis_step(B, prev, m, p, steps, "rk4")
                prev = m
            out.append(B)
        return out

    def predict(self, X, m, p=None, steps=None, solver="rk4"):
        """(n, d) predictions at fidelity m (m > 1 extrapolates).

        ``solver="dopri5"`` integrates adaptively; it needs plain-array params.
        """
        if m < 0:
            raise ValueError("fidelity must be >= 0")
        H = self.latent_h(X, m, p, steps, solver)
        B = self.basis_at(m, p, steps, solver)
        return ad.matmul(H, ad.transpose(B))

    def loss(self, p, split, steps=None):
        """Negative log-likelihood of ``split`` (full batch)."""
        if len(split) == 0:
            raise ValueError("empty batch")
        sse = 0.0
        ms = [float(m) for m in np.unique(split.m)]
        if ms[0] < 0:
            raise ValueError("fidelity must be >= 0")
        for m, B in zip(ms, self.bases_at(ms, p, steps)):
            idx = np.flatnonzero(split.m == m)
            H = self.latent_h(split.X[idx], m, p, steps)
            r = ad.sub(split.Y[idx], ad.matmul(H, ad.transpose(B)))
            sse = ad.add(sse, ad.sum_(ad.square(r)))
        return gaussian_nll(sse, len(split) * self.d, p["log_sigma2"])


class SfModel(_Model):
    """f(x) = B0 h0(x); all training examples pooled, fidelity ignored."""

    kind = "sf"

    def __init__(self, input_dim, d, K, hidden=DEFAULT_HIDDEN, seed=0, sigma2=0.01, b0=None,
                 layers=2):
        seeds = np.random.SeedSequence(seed).generate_state(1)
        self.input_dim, self.d, self.K = int(input_dim), int(d), int(K)
        self.hidden = int(hidden)
        self.layers = int(layers)
        self.seed = seed
        widths = [input_dim] + [hidden] * layers + [K]
        self.h0 = Mlp.init(widths, int(seeds[0]))
        self.b0 = np.zeros((d, K)) if b0 is None else np.array(b0, dtype=np.float64)
        self.log_sigma2 = np.array(math.log(sigma2))

    def params(self):
        out = self.h0.named_params("h0")
        out["b0"] = self.b0
        out["log_sigma2"] = self.log_sigma2
        return out

    def set_params(self, params):
        self.h0.load_named(params, "h0")
        self.b0 = np.asarray(params["b0"], dtype=np.float64)
        self.log_sigma2 = np.asarray(params["log_sigma2"], dtype=np.float64)

    def config(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "d": self.d, "K": self.K,
                "hidden": self.hidden, "layers": self.layers, "seed": self.seed}

    def predict(self, X, m=None, p=None, steps=None, solver=None):
        p = self.params() if p is None else p
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        H = self.h0(X, self._net_params(p, "h0", self.h0))
        return ad.matmul(H, ad.transpose(p["b0"]))

    def loss(self, p, split, steps=None):
        if len(split) == 0:
            raise ValueError("empty batch")
        r = ad.sub(split.Y, self.predict(split.X, None, p))
        return gaussian_nll(ad.sum_(ad.square(r)), len(split) * self.d, p["log_sigma2"])


def mlp_param_count(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def matched_sf_hidden(input_dim, d, K, hidden=DEFAULT_HIDDEN):
    """SF hidden width whose parameter count is closest to IFC-ODE^2's."""
    target = (mlp_param_count(mlp_widths(1 + K + input_dim, K, hidden))
              + mlp_param_count(mlp_widths(input_dim, K, hidden))
              + mlp_param_count(mlp_widths(2, 1, hidden)))
    best = min(range(1, 4 * hidden + 64),
               key=lambda w: abs(mlp_param_count(mlp_widths(input_dim, K, w)) - target))
    return best
