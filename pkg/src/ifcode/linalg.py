"""Dense kernels: Cholesky, triangular solves, mode unfolding, Kronecker statistics.

Matrices and tensors are plain C-ordered float64 numpy arrays. A tensor of
shape (d1, ..., dR, K, T) is stored with the last index fastest, which is the
ordering that makes ``vec(B) ~ N(vec(U), S1 x ... x S_{R+2})`` line up with
``np.kron`` applied left to right.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_triangular

DEFAULT_JITTER = 1e-8
RETRY_JITTER = 1e-6


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


def _as_square(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def cholesky(a, jitter=0.0):
    """Lower Cholesky factor of ``a + jitter * I``.

    Raises NotPositiveDefinite when a pivot is <= 0; callers may retry with a
    larger jitter (see :func:`safe_cholesky`).
    """
    a = _as_square(a)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    try:
        return np.linalg.cholesky(a + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"non-positive pivot (jitter={jitter:g})") from exc


def safe_cholesky(a, jitter=DEFAULT_JITTER, retry=RETRY_JITTER):
    """Cholesky with one jitter retry; returns ``(L, jitter_used)``."""
    try:
        return cholesky(a, jitter), jitter
    except NotPositiveDefinite:
        if retry <= jitter:
            raise
        return cholesky(a, retry), retry


def solve_lower(L, b):
    return _solve_triangular(L, b, lower=True)


def solve_upper(U, b):
    return _solve_triangular(U, b, lower=False)


def cho_solve(L, b):
    """Solve ``(L L^T) x = b`` given the lower factor."""
    return solve_upper(L.T, solve_lower(L, b))


def unfold(t, mode):
    """Mode-``mode`` unfolding (1-based): rows index ``mode``, the remaining
    modes follow in their original order with the last one fastest."""
    t = np.asarray(t)
    if t.ndim == 0:
        raise ValueError("tensor must have at least one mode")
    if not 1 <= mode <= t.ndim:
        raise ValueError(f"mode {mode} out of range for a {t.ndim}-mode tensor")
    return np.moveaxis(t, mode - 1, 0).reshape(t.shape[mode - 1], -1)


def fold(mat, mode, shape):
    """Inverse of :func:`unfold`."""
    shape = tuple(int(s) for s in shape)
    if not 1 <= mode <= len(shape):
        raise ValueError(f"mode {mode} out of range for a {len(shape)}-mode tensor")
    moved = (shape[mode - 1],) + shape[: mode - 1] + shape[mode:]
    return np.moveaxis(np.asarray(mat).reshape(moved), 0, mode - 1)


def kron_diag_stats(factors):
    """Trace and log-determinant of ``S_1 x ... x S_n`` from Cholesky factors.

    ``factors`` holds lower Cholesky factors ``L_r`` with ``S_r = L_r L_r^T``.
    Returns ``(prod_r tr S_r, sum_r (N / d_r) logdet S_r)`` where ``N`` is the
    size of the Kronecker product.
    """
    sizes = [np.asarray(L).shape[0] for L in factors]
    total = int(np.prod(sizes))
    trace_product = 1.0
    logdet_sum = 0.0
    for L, size in zip(factors, sizes):
        L = np.asarray(L, dtype=np.float64)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("Cholesky factors must be square")
        trace_product *= float(np.sum(L * L))
        logdet_sum += (total // size) * 2.0 * float(np.sum(np.log(np.abs(np.diag(L)))))
    return trace_product, logdet_sum
