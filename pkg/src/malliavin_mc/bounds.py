"""Closed-form moment constants for the flows and the weight.

Everything is evaluated in log space; the constants explode doubly
exponentially in p, so ``beta1(8, T)`` and friends overflow float64 for
moderate K1. Overflowed values are returned as ``inf`` and the logs stay
available for reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

LOG3 = math.log(3.0)


def default_C_q(q):
    """Over-estimate of the Burkholder-Davis-Gundy constant used in the q-th moment bound."""
    return (q * (q - 1) / 2.0) ** (q / 2.0) * q ** (q / 2.0)


def _log(x):
    x = float(x)
    if x < 0:
        raise ValueError(f"expected a nonnegative constant, got {x}")
    return math.log(x) if x > 0 else -math.inf


def _exp(logv):
    if logv == -math.inf:
        return 0.0
    if logv > 709.78:
        return math.inf
    return math.exp(logv)


def _logsumexp(logs):
    logs = [z for z in logs if z != -math.inf]
    if not logs:
        return -math.inf
    top = max(logs)
    if top == math.inf:
        return math.inf
    return top + math.log(sum(math.exp(z - top) for z in logs))


def _check_p(p, what="p"):
    if not p >= 2:
        raise ValueError(f"{what} must be >= 2, got {p}")


@dataclass(frozen=True)
class BoundConstants:
    K1: Callable[[float], float]
    K2: Callable[[float], float]
    lam: Callable[[float], float]
    d: int
    C_q: Callable[[float], float] = default_C_q

    def log_beta1(self, p, t):
        _check_p(p)
        k1 = float(self.K1(t))
        if k1 == 0.0:
            return (p - 1) * LOG3
        expo = 3.0 ** (p - 1) * (t ** (p - 1) + t ** (p / 2 - 1)) * k1 ** p
        return (p - 1) * LOG3 + expo

    def log_beta2(self, p, t):
        _check_p(p)
        k1 = float(self.K1(t))
        if k1 == 0.0:
            return (p - 1) * LOG3
        expo = 3.0 ** (p - 1) * (t ** (p - 1) * (k1 + k1 * k1) ** p + t ** (p / 2 - 1) * k1 ** p)
        return (p - 1) * LOG3 + expo

    def beta1(self, p, t):
        return _exp(self.log_beta1(p, t))

    def beta2(self, p, t):
        return _exp(self.log_beta2(p, t))

    # first moment: one bound per weight term, summing to Gamma_T

    def log_theta_bounds(self, T):
        d = self.d
        lk1, lk2, llam = _log(self.K1(T)), _log(self.K2(T)), _log(self.lam(T))
        lT, ld = math.log(T), math.log(d)
        b1, b2 = self.log_beta1, self.log_beta2
        half44 = 0.5 * (b1(4, T) + b2(4, T))
        t1 = llam + 0.5 * (ld + lT) + 0.5 * (b1(2, T) + b2(2, T))
        t2 = ld + 2 * lT + lk2 + half44
        t3 = ld + 2 * lT + lk2 + 0.25 * (b2(4, T) + b1(8, T) + 2 * b2(2, T))
        t4 = ld + lT + llam + lk1 + half44
        t5 = ld + 2 * lT + lk1 + lk2 + half44
        return (t1, t2, t3, t4, t5)

    def theta_bounds(self, T):
        return tuple(_exp(z) for z in self.log_theta_bounds(T))

    def log_Gamma_T(self, T):
        return _logsumexp(self.log_theta_bounds(T))

    def Gamma_T(self, T):
        return _exp(self.log_Gamma_T(T))

    # q-th moment

    def log_theta_bounds_q(self, T, q):
        _check_p(q, "q")
        d = self.d
        lk1, lk2, llam = _log(self.K1(T)), _log(self.K2(T)), _log(self.lam(T))
        lT, ld, lC = math.log(T), math.log(d), _log(self.C_q(q))
        b1, b2 = self.log_beta1, self.log_beta2
        half44 = 0.5 * (b1(4 * q, T) + b2(4 * q, T))
        t1 = lC + q * llam + 0.5 * q * (ld + lT) + 0.5 * (b1(2 * q, T) + b2(2 * q, T))
        t3 = (lC + q * ld + 0.5 * (3 * q + 1) * lT + q * lk2
              + 0.25 * (b2(4 * q, T) + b1(8 * q, T) + 2 * b2(2 * q, T)))
        t2 = q * ld + 2 * q * lT + q * lk2 + half44
        t4 = q * ld + q * lT + q * llam + q * lk1 + half44
        t5 = q * ld + 2 * q * lT + q * lk1 + q * lk2 + half44
        return (t1, t2, t3, t4, t5)

    def log_Gamma_Tq(self, T, q):
        return _logsumexp(self.log_theta_bounds_q(T, q))

    def Gamma_Tq(self, T, q):
        return _exp(self.log_Gamma_Tq(T, q))

    def log_moment_bound(self, T, q, v_norm=1.0):
        """log of {5^{q'-1} Gamma_{T,q'}}^{1/q'} |v| with q' = max(q, 2)."""
        if not q >= 1:
            raise ValueError(f"q must be >= 1, got {q}")
        qq = max(q, 2.0)
        return ((qq - 1) * math.log(5.0) + self.log_Gamma_Tq(T, qq)) / qq + _log(v_norm)

    def moment_bound(self, T, q, v_norm=1.0):
        return _exp(self.log_moment_bound(T, q, v_norm))


def bound_constants(model, d=None, C_q=None) -> BoundConstants:
    """Bound evaluators from the model's declared K1, K2 and lambda."""
    return BoundConstants(model.K1, model.K2, model.lam, model.d if d is None else int(d),
                          default_C_q if C_q is None else _as_callable(C_q))


def _as_callable(c):
    if callable(c):
        return c
    value = float(c)
    if not np.isfinite(value) or value < 0:
        raise ValueError("C_q override must be a nonnegative finite number")
    return lambda q: value


def finite_or_none(x):
    """JSON-friendly float: non-finite values become None."""
    x = float(x)
    return x if math.isfinite(x) else None
