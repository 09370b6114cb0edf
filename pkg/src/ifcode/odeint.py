"""Integrators for the fidelity ODEs.

``rk4_integrate`` is built from autodiff primitives, so gradients flow through
the unrolled steps. ``dopri5_integrate`` works on plain arrays only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad

STEPS_PER_UNIT = 10


class NonFiniteState(FloatingPointError):
    pass


class StepUnderflow(RuntimeError):
    pass


@dataclass
class OdeProblem:
    """dy/dm = dynamics(m, y, context) on [span[0], span[1]]."""

    dynamics: Callable
    y0: object
    span: tuple
    context: object = None


@dataclass
class Dopri5Stats:
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0
    steps: list = field(default_factory=list)


def steps_for(m, steps_per_unit=STEPS_PER_UNIT):
    """RK4 step count for integrating over a fidelity interval of length m."""
    return max(1, math.ceil(steps_per_unit * abs(m) - 1e-9))


def _check(y, where):
    if not np.all(np.isfinite(ad.value(y))):
        raise NonFiniteState(f"non-finite state {where}")


def rk4_integrate(p: OdeProblem, steps: int):
    """Classical RK4 with ``steps`` uniform steps; returns the state at span[1]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    m0, m1 = float(p.span[0]), float(p.span[1])
    y = p.y0
    if m1 == m0:
        return y
    h = (m1 - m0) / steps
    f, ctx = p.dynamics, p.context
    for i in range(steps):
        m = m0 + i * h
        k1 = f(m, y, ctx)
        _check(k1, f"at m={m:g}")
        k2 = f(m + 0.5 * h, y + (0.5 * h) * k1, ctx)
        _check(k2, f"at m={m + 0.5 * h:g}")
        k3 = f(m + 0.5 * h, y + (0.5 * h) * k2, ctx)
        _check(k3, f"at m={m + 0.5 * h:g}")
        k4 = f(m + h, y + h * k3, ctx)
        _check(k4, f"at m={m + h:g}")
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(y, f"after step to m={m + h:g}")
    return y


# Dormand-Prince 5(4) tableau (Hairer, Norsett & Wanner, table 5.2)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def dopri5_solve(p: OdeProblem, rtol=1e-6, atol=1e-9, safety=0.9,
                 min_factor=0.2, max_factor=5.0, max_steps=100000):
    """Adaptive Dormand-Prince 5(4); returns ``(y(span[1]), Dopri5Stats)``."""
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    m0, m1 = float(p.span[0]), float(p.span[1])
    y = np.array(ad.value(p.y0), dtype=np.float64)
    stats = Dopri5Stats()
    span = m1 - m0
    if span == 0:
        return y, stats
    f = lambda m, yy: np.asarray(p.dynamics(m, yy, p.context), dtype=np.float64)
    direction = math.copysign(1.0, span)
    h = span / 100.0
    h_min = 1e-12 * abs(span)
    m = m0
    k1 = f(m, y)
    stats.evaluations += 1
    if not np.any(k1):
        # flat start gives no scale for the first step: try the whole span
        h = span
    while direction * (m1 - m) > 0:
        if stats.accepted + stats.rejected >= max_steps:
            raise StepUnderflow("maximum number of steps exceeded")
        if abs(h) < h_min:
            raise StepUnderflow(f"step {abs(h):.3g} below {h_min:.3g} at m={m:g}")
        if direction * (m + h - m1) > 0:
            h = m1 - m
        ks = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(m + _C[i] * h, yi))
        stats.evaluations += 6
        y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteState(f"non-finite state near m={m:g}")
        err = h * sum(e * k for e, k in zip(_E, ks))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2))) if err.size else 0.0
        if err_norm <= 1.0:
            m = m1 if h == m1 - m else m + h
            y = y_new
            k1 = ks[6]
            stats.accepted += 1
            stats.steps.append(abs(h))
            if err_norm == 0.0:
                # no error information: take the rest of the interval
                h = m1 - m
                continue
            factor = min(max_factor, safety * err_norm ** -0.2)
        else:
            stats.rejected += 1
            factor = max(min_factor, safety * err_norm ** -0.2)
        h *= max(min_factor, factor)
    return y, stats


def dopri5_integrate(p: OdeProblem, rtol=1e-6, atol=1e-9):
    return dopri5_solve(p, rtol, atol)[0]
