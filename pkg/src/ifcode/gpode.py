"""IFC-GPODE: GP prior over fidelity-indexed bases with a tensor-Gaussian posterior.

The bases at the T training fidelities form a tensor of shape
``(d_1, ..., d_R, K, T)``. The variational posterior is
``N(vec U, S_1 x ... x S_{R+2})`` with ``S_r = L_r L_r^T``, and the prior is
``N(0, I_{dK} x Kmat)`` with ``Kmat`` the SE kernel on the fidelities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ifc import LOG_2PI, _Model, pca_warm_start
from .nn import DEFAULT_HIDDEN, Mlp, mlp_widths
from .odeint import STEPS_PER_UNIT

KERNEL_JITTER = 1e-6


class UnknownFidelity(KeyError):
    pass


@dataclass
class SeKernel:
    log_lengthscale: float = 0.0
    log_variance: float = 0.0

    @property
    def lengthscale(self):
        return math.exp(self.log_lengthscale)

    @property
    def variance(self):
        return math.exp(self.log_variance)


def se_kernel_matrix(k, fidelities, jitter=KERNEL_JITTER, other=None):
    """SE kernel between fidelity lists; jitter only on the square case.

    ``k`` is a SeKernel or a pair ``(log_lengthscale, log_variance)`` of
    arrays/Vars, so the result is differentiable in the hyperparameters.
    """
    if isinstance(k, SeKernel):
        log_ls, log_var = k.log_lengthscale, k.log_variance
    else:
        log_ls, log_var = k
    s = np.asarray(fidelities, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("fidelities must be finite")
    t = s if other is None else np.asarray(other, dtype=np.float64)
    sq = (t[:, None] - s[None, :]) ** 2
    scaled = ad.mul(-0.5 * sq, ad.exp(ad.mul(-2.0, log_ls)))
    out = ad.mul(ad.exp(log_var), ad.exp(scaled))
    if other is None and jitter:
        out = ad.add(out, jitter * np.eye(len(s)))
    return out


def fold_sizes(d, R):
    """Equal per-mode sizes d_r with prod d_r = d."""
    if R < 1:
        raise ValueError("R must be >= 1")
    dr = round(d ** (1.0 / R))
    for cand in (dr - 1, dr, dr + 1):
        if cand >= 1 and cand**R == d:
            return (cand,) * R
    raise ValueError(f"d={d} is not a perfect {R}-th power")


def lower_factor(strict, log_diag):
    """L = strict lower part of ``strict`` + diag(exp(log_diag))."""
    return ad.add(ad.tril(strict, -1), ad.diagflat(ad.exp(log_diag)))


@dataclass
class TensorGaussianPosterior:
    """Mean tensor and per-mode Cholesky factors (arrays or tape Vars).

    ``mean`` may be stored flattened to ``(d, K, T)``; ``dims`` gives the
    folded output sizes ``(d_1, ..., d_R)``.
    """

    mean: object
    chol: list
    dims: tuple

    @property
    def R(self):
        return len(self.dims)

    @property
    def d(self):
        return int(np.prod(self.dims))

    @property
    def K(self):
        return ad.value(self.chol[-2]).shape[0]

    @property
    def T(self):
        return ad.value(self.chol[-1]).shape[0]

    @property
    def shape(self):
        return tuple(self.dims) + (self.K, self.T)

    def mean_tensor(self):
        return np.asarray(ad.value(self.mean)).reshape(self.shape)

    def covariance_param_count(self):
        return sum(n * (n + 1) // 2 for n in tuple(self.dims) + (self.K, self.T))


def _trace_sigma(L):
    return ad.sum_(ad.square(L))


def kl_term(post: TensorGaussianPosterior, kmat):
    """KL(q || p) between the tensor-Gaussian posterior and N(0, I_dK x kmat).

    Includes every constant, so it is the exact Gaussian KL; nothing of size
    dKT x dKT is formed.
    """
    d, K, T = post.d, post.K, post.T
    n_total = d * K * T
    sizes = tuple(post.dims) + (K, T)
    trace_prod = 1.0
    for L in post.chol[:-1]:
        trace_prod = ad.mul(trace_prod, _trace_sigma(L))
    L_T = post.chol[-1]
    sigma_T = ad.matmul(L_T, ad.transpose(L_T))
    term_cov = ad.mul(ad.trace(ad.solve(kmat, sigma_T)), trace_prod)
    U = ad.reshape(post.mean, (d * K, T))  # columns are mode-(R+2) fibres
    gram = ad.matmul(ad.transpose(U), U)  # U_{R+2} U_{R+2}^T, T x T
    term_mean = ad.trace(ad.solve(kmat, gram))
    term_logdet_prior = ad.mul(float(d * K), ad.logdet(kmat))
    logdet_q = 0.0
    for L, n in zip(post.chol, sizes):
        ld = ad.mul(2.0, ad.sum_(ad.log(ad.diag(L))))
        logdet_q = ad.add(logdet_q, ad.mul(float(n_total // n), ld))
    total = ad.add(ad.add(term_cov, term_mean), ad.sub(term_logdet_prior, logdet_q))
    return ad.mul(0.5, ad.sub(total, float(n_total)))


def second_moment(post: TensorGaussianPosterior, t):
    """E[B_t^T B_t] (K x K) for the basis slice at fidelity index t."""
    L_T = post.chol[-1]
    sigma_tt = ad.sum_(ad.square(ad.getitem(L_T, t)))
    scale = sigma_tt
    for L in post.chol[:post.R]:
        scale = ad.mul(scale, _trace_sigma(L))
    L_K = post.chol[post.R]
    EB = mean_slice(post, t)
    return ad.add(ad.matmul(ad.transpose(EB), EB),
                  ad.mul(scale, ad.matmul(L_K, ad.transpose(L_K))))


def mean_slice(post: TensorGaussianPosterior, t):
    """E[B_t]: the t-th mode-(R+2) slice of the mean, as a d x K matrix."""
    U = ad.reshape(post.mean, (post.d, post.K, post.T))
    return ad.getitem(U, (slice(None), slice(None), t))


def expected_loglik_batch(post, t, Z, Y, log_sigma2):
    """Sum over rows of E_q[log N(y | B_t z, sigma^2 I)] for one fidelity."""
    n, d = np.shape(ad.value(Y))
    EB = mean_slice(post, t)
    P = ad.matmul(Z, ad.transpose(EB))  # rows E[B] z
    L_T = post.chol[-1]
    scale = ad.sum_(ad.square(ad.getitem(L_T, t)))
    for L in post.chol[:post.R]:
        scale = ad.mul(scale, _trace_sigma(L))
    ZL = ad.matmul(Z, post.chol[post.R])
    quad = ad.add(ad.sum_(ad.square(P)), ad.mul(scale, ad.sum_(ad.square(ZL))))
    yy = float(np.sum(np.square(ad.value(Y))))
    cross = ad.sum_(ad.mul(Y, P))
    inner = ad.add(ad.sub(yy, ad.mul(2.0, cross)), quad)
    return ad.sub(ad.mul(-0.5 * n * d, ad.add(LOG_2PI, log_sigma2)),
                  ad.mul(0.5, ad.mul(inner, ad.exp(ad.neg(log_sigma2)))))


class GpodeModel(_Model):
    kind = "ifc-gpode"

    def __init__(self, input_dim, d, K, fidelities, R=2, hidden=DEFAULT_HIDDEN, seed=0,
                 steps_per_unit=STEPS_PER_UNIT, sigma2=0.01, mean=None, chol_scale=0.1,
                 lengthscale=1.0, variance=1.0, zero_init_output=True):
        fid = np.asarray(sorted(float(f) for f in fidelities))
        if len(np.unique(fid)) != len(fid):
            raise ValueError("fidelities must be distinct")
        seeds = np.random.SeedSequence(seed).generate_state(2)
        self.input_dim, self.d, self.K, self.R = int(input_dim), int(d), int(K), int(R)
        self.dims = fold_sizes(d, R)
        self.fidelities = fid
        self.hidden, self.seed, self.steps_per_unit = int(hidden), seed, steps_per_unit
        self.phi = Mlp.init(mlp_widths(1 + K + input_dim, K, hidden), int(seeds[0]))
        self.beta = Mlp.init(mlp_widths(input_dim, K, hidden), int(seeds[1]))
        if zero_init_output:
            self.phi.weights[-1][:] = 0.0
        T = len(fid)
        if mean is None:
            mean = np.zeros((d, K, T))
        self.U = np.array(mean, dtype=np.float64).reshape(d, K, T)
        sizes = self.dims + (K, T)
        self.chol_strict = [np.zeros((n, n)) for n in sizes]
        self.chol_logdiag = [np.full(n, math.log(chol_scale)) for n in sizes]
        self.log_lengthscale = np.array(math.log(lengthscale))
        self.log_variance = np.array(math.log(variance))
        self.log_sigma2 = np.array(math.log(sigma2))
        self.latent_dynamics = None

    @classmethod
    def warm_start(cls, input_dim, Y, K, fidelities, **kw):
        """Posterior mean from the PCA of the training outputs, same in every slice."""
        nu = pca_warm_start(Y, K)
        T = len(fidelities)
        return cls(input_dim, Y.shape[1], K, fidelities, mean=np.repeat(nu[:, :, None], T, axis=2), **kw)

    @property
    def T(self):
        return len(self.fidelities)

    def params(self):
        out = {}
        out.update(self.phi.named_params("phi"))
        out.update(self.beta.named_params("beta"))
        out["U"] = self.U
        for r, (A, a) in enumerate(zip(self.chol_strict, self.chol_logdiag)):
            out[f"L{r}.strict"] = A
            out[f"L{r}.logdiag"] = a
        out["log_lengthscale"] = self.log_lengthscale
        out["log_variance"] = self.log_variance
        out["log_sigma2"] = self.log_sigma2
        return out

    def set_params(self, params):
        self.phi.load_named(params, "phi")
        self.beta.load_named(params, "beta")
        self.U = np.asarray(params["U"], dtype=np.float64)
        for r in range(len(self.chol_strict)):
            self.chol_strict[r] = np.asarray(params[f"L{r}.strict"], dtype=np.float64)
            self.chol_logdiag[r] = np.asarray(params[f"L{r}.logdiag"], dtype=np.float64)
        self.log_lengthscale = np.asarray(params["log_lengthscale"], dtype=np.float64)
        self.log_variance = np.asarray(params["log_variance"], dtype=np.float64)
        self.log_sigma2 = np.asarray(params["log_sigma2"], dtype=np.float64)

    def config(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "d": self.d, "K": self.K,
                "R": self.R, "hidden": self.hidden, "seed": self.seed,
                "steps_per_unit": self.steps_per_unit, "fidelities": self.fidelities.tolist()}

    @property
    def kernel(self):
        return SeKernel(float(self.log_lengthscale), float(self.log_variance))

    def posterior(self, p=None):
        p = self.params() if p is None else p
        chol = [lower_factor(p[f"L{r}.strict"], p[f"L{r}.logdiag"]) for r in range(self.R + 2)]
        return TensorGaussianPosterior(p["U"], chol, self.dims)

    def kernel_matrix(self, p=None):
        p = self.params() if p is None else p
        return se_kernel_matrix((p["log_lengthscale"], p["log_variance"]), self.fidelities)

    def fidelity_index(self, m):
        hits = np.flatnonzero(np.abs(self.fidelities - m) <= 1e-12)
        if len(hits) == 0:
            raise UnknownFidelity(f"fidelity {m} is not a training fidelity {self.fidelities.tolist()}")
        return int(hits[0])

    def latent_h(self, X, m, p=None, steps=None, solver="rk4"):
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

    def expected_loglik(self, x, m, y, z, p=None):
        """E_q[log N(y | B_m z, sigma^2 I)] for one example with latent z."""
        p = self.params() if p is None else p
        t = self.fidelity_index(m)
        Z = ad.reshape(z, (1, self.K))
        return expected_loglik_batch(self.posterior(p), t, Z, np.atleast_2d(y), p["log_sigma2"])

    def elbo(self, split, p=None, steps=None):
        p = self.params() if p is None else p
        post = self.posterior(p)
        out = ad.neg(kl_term(post, self.kernel_matrix(p)))
        for m in np.unique(split.m) if len(split) else []:
            t = self.fidelity_index(float(m))
            idx = np.flatnonzero(split.m == m)
            Z = self.latent_h(split.X[idx], float(m), p, steps)
            out = ad.add(out, expected_loglik_batch(post, t, Z, split.Y[idx], p["log_sigma2"]))
        return out

    def loss(self, p, split, steps=None):
        return ad.neg(self.elbo(split, p, steps))

    def predict_basis_at(self, m, p=None):
        """Kriging mean of the bases at fidelity m: sum_j w_j(m) E[B_{s_j}]."""
        if m < 0:
            raise ValueError("fidelity must be >= 0")
        p = self.params() if p is None else p
        kparams = (p["log_lengthscale"], p["log_variance"])
        kmat = se_kernel_matrix(kparams, self.fidelities)
        cross = se_kernel_matrix(kparams, self.fidelities, other=[m])  # 1 x T
        exact = np.abs(self.fidelities - m) <= 1e-12
        if exact.any():
            cross = ad.add(cross, KERNEL_JITTER * exact[None, :].astype(float))
        w = ad.transpose(ad.solve(kmat, ad.transpose(cross)))  # K^-1 symmetric
        U = ad.reshape(p["U"], (self.d * self.K, self.T))
        B = ad.matmul(U, ad.reshape(w, (self.T,)))
        return ad.reshape(B, (self.d, self.K))

    def predict(self, X, m, p=None, steps=None, solver="rk4"):
        H = self.latent_h(X, m, p, steps, solver)
        return ad.matmul(H, ad.transpose(self.predict_basis_at(m, p)))
