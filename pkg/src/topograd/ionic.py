"""Cubic ionic current ``f(u) = A2 (u - u1)(u - u2)(u - u3)`` and the potential rescaling."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class IonicParams:
    """Cubic reaction parameters in the rescaled (dimensionless) frame.

    ``nu`` and ``Cm`` are carried for the physical-time conversion only; the
    solvers work in time units where both are folded into 1.  ``alpha`` and
    ``beta`` (mV) define ``u_rescaled = (alpha + u_mV) / beta``.
    """

    A2: float = 0.2
    u1: float = 0.0
    u2: float = 0.15
    u3: float = 1.0
    nu: float = 500.0
    Cm: float = 0.1
    alpha: float = 85.0
    beta: float = 125.0

    def __post_init__(self):
        if not (self.u1 < self.u2 < self.u3):
            raise ValueError("need u1 < u2 < u3")
        if not self.A2 > 0:
            raise ValueError("A2 must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @classmethod
    def printed_volt_scaling(cls, **kw):
        """Rescaling constants taken literally as printed (0.085, 0.125)."""
        return cls(alpha=0.085, beta=0.125, **kw)

    def with_(self, **kw):
        return replace(self, **kw)

    @property
    def amplitude(self):
        return self.u3 - self.u1


DEFAULT = IonicParams()


def f(u, p: IonicParams = DEFAULT):
    u = np.asarray(u, dtype=float)
    return p.A2 * (u - p.u1) * (u - p.u2) * (u - p.u3)


def f_prime(u, p: IonicParams = DEFAULT):
    u = np.asarray(u, dtype=float)
    a, b, c = p.u1, p.u2, p.u3
    return p.A2 * (3 * u * u - 2 * (a + b + c) * u + (a * b + b * c + a * c))


def critical_points(p: IonicParams = DEFAULT):
    """The two real zeros of ``f_prime`` (local max, local min of ``f``)."""
    a, b, c = p.u1, p.u2, p.u3
    s = a + b + c
    disc = s * s - 3 * (a * b + b * c + a * c)
    r = np.sqrt(disc)
    return (s - r) / 3.0, (s + r) / 3.0


def max_abs_f_prime(p: IonicParams = DEFAULT, lo=None, hi=None):
    """``max |f'|`` on ``[lo, hi]`` (defaults to ``[u1, u3]``)."""
    lo = p.u1 if lo is None else lo
    hi = p.u3 if hi is None else hi
    cand = [lo, hi] + [x for x in ((p.u1 + p.u2 + p.u3) / 3.0,) if lo <= x <= hi]
    return float(np.max(np.abs(f_prime(np.array(cand), p))))


def rescale(u_mV, p: IonicParams = DEFAULT):
    return (p.alpha + np.asarray(u_mV, dtype=float)) / p.beta


def unrescale(u, p: IonicParams = DEFAULT):
    return np.asarray(u, dtype=float) * p.beta - p.alpha


def time_scale(p: IonicParams = DEFAULT):
    """Physical time per rescaled time unit, ``Cm`` (ms) with ``nu`` folded into space."""
    return p.Cm
