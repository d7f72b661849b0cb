"""SDE problem definitions: coefficients, derivatives and semigroup conjugation.

All coefficient callables are vectorised: ``x`` has shape (..., d) and the
outputs carry the same leading shape. Conventions:

* ``drift(t, x)`` -> (..., d)
* ``drift_jac(t, x)`` -> (..., d, d) with ``drift_jac @ u = grad_u b``
* ``drift_hess(t, x, u, w)`` -> (..., d), the derivative in direction ``w``
  of ``x -> drift_jac(t, x) @ u``
* ``sigma(t, x)`` -> (..., d, m); column k is ``sigma_col(t, x, k)``
* ``sigma_jac(t, x, k)`` -> (..., d, d), Jacobian of column k
* ``sigma_hess(t, x, k, u, w)`` -> (..., d)
* ``sigma_inv(t, x)`` -> (..., d, d)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ModelEvaluationError(FloatingPointError):
    """A coefficient returned non-finite values."""


@dataclass(frozen=True)
class GeneratorSpec:
    """The linear part A = -diag(spectrum); ``zero`` mode means A = 0."""

    mode: str = "zero"
    spectrum: tuple = ()

    @classmethod
    def zero(cls, d):
        return cls("zero", (0.0,) * d)

    @classmethod
    def diagonal(cls, spectrum):
        return cls("diagonal", tuple(float(s) for s in spectrum))

    @property
    def mu(self):
        return np.asarray(self.spectrum, dtype=float)


def _const(value):
    value = float(value)

    def fn(t):
        return value

    fn.value = value
    return fn


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    m: int
    generator: GeneratorSpec
    drift: Callable
    drift_jac: Callable
    drift_hess: Callable
    sigma: Callable
    sigma_jac: Callable
    sigma_hess: Callable
    sigma_inv: Callable
    K1: Callable[[float], float]
    K2: Callable[[float], float]
    lam: Callable[[float], float]
    K: Callable[[float], float] | None = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.m != self.d:
            raise ValueError("noise dimension must equal the state dimension (sigma must be square)")
        if len(self.generator.spectrum) != self.d:
            raise ValueError("generator spectrum length must equal d")

    def sigma_col(self, t, x, k):
        return self.sigma(t, x)[..., :, k]


@dataclass(frozen=True)
class ConjugatedCoeffs:
    """Coefficients conjugated by the diagonal semigroup e^{At}.

    B = e^{-At} drift_jac e^{At} and Sigma_k = e^{-At} sigma_jac_k e^{At},
    evaluated entrywise: entry (i, j) is scaled by exp((mu_i - mu_j) t).
    """

    model: ModelSpec
    mu: np.ndarray

    @property
    def is_zero(self):
        return not np.any(self.mu)

    def semigroup(self, t):
        return np.diag(np.exp(-self.mu * t))

    def semigroup_inv(self, t):
        return np.diag(np.exp(self.mu * t))

    def semigroup_diag(self, t):
        return np.exp(-self.mu * t)

    def _factor(self, t):
        return np.exp((self.mu[:, None] - self.mu[None, :]) * t)

    def B(self, t, x):
        jac = self.model.drift_jac(t, x)
        if self.is_zero:
            return jac
        return jac * self._factor(t)

    def Sigma_k(self, t, x, k):
        jac = self.model.sigma_jac(t, x, k)
        if self.is_zero:
            return jac
        return jac * self._factor(t)

    def Sigma_all(self, t, x):
        """All conjugated noise Jacobians stacked on axis -3: (..., m, d, d)."""
        return np.stack([self.Sigma_k(t, x, k) for k in range(self.model.m)], axis=-3)

    def B_hess(self, t, x, u, w):
        if self.is_zero:
            return self.model.drift_hess(t, x, u, w)
        return np.exp(self.mu * t) * self.model.drift_hess(t, x, np.exp(-self.mu * t) * u, w)

    def Sigma_hess_k(self, t, x, k, u, w):
        if self.is_zero:
            return self.model.sigma_hess(t, x, k, u, w)
        return np.exp(self.mu * t) * self.model.sigma_hess(t, x, k, np.exp(-self.mu * t) * u, w)


def build_conjugated(model: ModelSpec) -> ConjugatedCoeffs:
    gen = model.generator
    if gen.mode not in ("zero", "diagonal"):
        raise ValueError(f"unsupported generator mode {gen.mode!r}")
    mu = gen.mu
    if not np.all(np.isfinite(mu)) or np.any(mu < 0):
        raise ValueError(f"generator spectrum must be finite and nonnegative, got {gen.spectrum}")
    if gen.mode == "zero" and np.any(mu):
        raise ValueError("zero generator mode requires an all-zero spectrum")
    return ConjugatedCoeffs(model, mu)


# ---------------------------------------------------------------------------
# assumption sampling

@dataclass
class AssumptionReport:
    sample_count: int
    region_radius: float
    T_max: float
    max_B: float
    max_Sigma_l2: float
    max_Sigma_l1: float
    max_grad_B: float
    max_grad_Sigma_l2: float
    max_sigma_inv: float
    max_K1_quantity: float
    violations: list
    # declared constant K(T_max); reported for reference, no bound consumes it
    declared_K: float | None = None

    @property
    def n_violations(self):
        return len(self.violations)

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "violations"}
        out["n_violations"] = self.n_violations
        out["violations"] = self.violations[:20]
        out["passed"] = self.passed
        return out


def _opnorm(a):
    if a.shape[-1] == 1 and a.shape[-2] == 1:
        return np.abs(a[..., 0, 0])
    return np.linalg.norm(a, 2, axis=(-2, -1))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ModelEvaluationError(f"{name} returned non-finite values")
    return arr


def _uniform_ball(rng, n, d, radius):
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (radius * rng.random((n, 1)) ** (1.0 / d))


def validate_assumptions(model, sample_count, region_radius, seed, T_max=1.0,
                         fd_step=1e-5, n_directions=4, rtol=1e-6):
    """Sample (t, x) and compare coefficient norms with the declared K1, K2, lambda.

    Bound violations are reported, not raised; non-finite coefficient
    values raise :class:`ModelEvaluationError`.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    coeffs = build_conjugated(model)
    rng = np.random.default_rng(seed)
    d = model.d
    ts = rng.random(sample_count) * T_max
    xs = _uniform_ball(rng, sample_count, d, region_radius)
    dirs = rng.standard_normal((n_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    stats = dict(max_B=0.0, max_Sigma_l2=0.0, max_Sigma_l1=0.0, max_grad_B=0.0,
                 max_grad_Sigma_l2=0.0, max_sigma_inv=0.0, max_K1_quantity=0.0)
    violations = []
    for t, x in zip(ts, xs):
        t = float(t)
        nB = float(_opnorm(_check_finite("B", coeffs.B(t, x))))
        S = _check_finite("Sigma", coeffs.Sigma_all(t, x))
        nS = _opnorm(S)
        l2 = float(np.sqrt(np.sum(nS ** 2)))
        l1 = float(np.sum(nS))
        gB = 0.0
        gS = 0.0
        for w in dirs:
            dB = (coeffs.B(t, x + fd_step * w) - coeffs.B(t, x - fd_step * w)) / (2 * fd_step)
            gB = max(gB, float(_opnorm(_check_finite("grad B", dB))))
            dS = (coeffs.Sigma_all(t, x + fd_step * w) - coeffs.Sigma_all(t, x - fd_step * w)) / (2 * fd_step)
            gS = max(gS, float(np.sqrt(np.sum(_opnorm(_check_finite("grad Sigma", dS)) ** 2))))
        ni = float(_opnorm(_check_finite("sigma_inv", model.sigma_inv(t, x))))
        k1q = max(nB, l2, l1)
        for key, val in (("max_B", nB), ("max_Sigma_l2", l2), ("max_Sigma_l1", l1),
                         ("max_grad_B", gB), ("max_grad_Sigma_l2", gS),
                         ("max_sigma_inv", ni), ("max_K1_quantity", k1q)):
            stats[key] = max(stats[key], val)
        for qty, val, bound in (("K1", k1q, model.K1(t)), ("K2", max(gB, gS), model.K2(t)),
                                ("lambda", ni, model.lam(t))):
            if val > bound * (1 + rtol) + rtol:
                violations.append({"bound": qty, "t": t, "x": x.tolist(), "value": val, "declared": bound})
    declared_K = None if model.K is None else float(model.K(T_max))
    return AssumptionReport(sample_count, float(region_radius), float(T_max), violations=violations,
                            declared_K=declared_K, **stats)


def fd_derivative_errors(model, t, x, u, w, h):
    """Central-difference defects of the second-derivative callables.

    Returns (drift_err, sigma_err) where sigma_err is the max over k.
    """
    du = model.drift_hess(t, x, u, w)
    fd = (model.drift_jac(t, x + h * w) @ u - model.drift_jac(t, x - h * w) @ u) / (2 * h)
    e_drift = float(np.max(np.abs(du - fd)))
    e_sigma = 0.0
    for k in range(model.m):
        sh = model.sigma_hess(t, x, k, u, w)
        fd = (model.sigma_jac(t, x + h * w, k) @ u - model.sigma_jac(t, x - h * w, k) @ u) / (2 * h)
        e_sigma = max(e_sigma, float(np.max(np.abs(sh - fd))))
    return e_drift, e_sigma


# ---------------------------------------------------------------------------
# built-in models

_REGISTRY: dict = {}


def register(name):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def builtin_names():
    return sorted(_REGISTRY)


def builtin_model(name, params=None):
    """Construct a registered test model from a parameter mapping.

    Besides the model-specific parameters, ``K1``, ``K2``, ``lam`` may be
    given as constants to override the declared assumption bounds.
    """
    if name not in _REGISTRY:
        raise ValueError(f"unknown model {name!r}; choose from {builtin_names()}")
    params = dict(params or {})
    overrides = {k: params.pop(k) for k in ("K1", "K2", "lam") if k in params}
    built = _REGISTRY[name](**params)
    if overrides:
        from dataclasses import replace
        built = replace(built, **{k: _const(v) for k, v in overrides.items()},
                        params={**built.params, **overrides})
    return built


def _eye(d, lead, scale=1.0):
    return np.broadcast_to(np.eye(d) * scale, lead + (d, d))


def _zero_sigma_hess(t, x, k, u, w):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(w)))


def _dim(d):
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    return int(d)


@register("additive_gauss")
def _additive_gauss(sigma0=1.0, d=1):
    d = _dim(d)
    sigma0 = float(sigma0)
    if not sigma0 > 0 or not math.isfinite(sigma0):
        raise ValueError("sigma0 must be positive and finite")

    def drift(t, x):
        return np.zeros(np.shape(x))

    def drift_jac(t, x):
        return np.zeros(np.shape(x)[:-1] + (d, d))

    def drift_hess(t, x, u, w):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(w)))

    def sigma(t, x):
        return _eye(d, np.shape(x)[:-1], sigma0)

    def sigma_jac(t, x, k):
        return np.zeros(np.shape(x)[:-1] + (d, d))

    def sigma_inv(t, x):
        return _eye(d, np.shape(x)[:-1], 1.0 / sigma0)

    return ModelSpec("additive_gauss", d, d, GeneratorSpec.zero(d), drift, drift_jac, drift_hess,
                     sigma, sigma_jac, _zero_sigma_hess, sigma_inv, _const(0.0), _const(0.0),
                     _const(1.0 / sigma0), _const(0.0), {"sigma0": sigma0, "d": d})


def _trig_parts(eps, alpha, d):
    def drift(t, x):
        return alpha * np.sin(x)

    def drift_jac(t, x):
        out = np.zeros(np.shape(x) + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = alpha * np.cos(x)
        return out

    def drift_hess(t, x, u, w):
        return -alpha * np.sin(x) * u * w

    def scale(x):
        return 1.0 + eps * np.sin(x[..., 0])

    def sigma(t, x):
        return np.eye(d) * scale(x)[..., None, None]

    def sigma_jac(t, x, k):
        out = np.zeros(np.shape(x) + (d,))
        out[..., k, 0] = eps * np.cos(x[..., 0])
        return out

    def sigma_hess(t, x, k, u, w):
        x, u, w = np.broadcast_arrays(x, u, w)
        out = np.zeros(x.shape)
        out[..., k] = -eps * np.sin(x[..., 0]) * u[..., 0] * w[..., 0]
        return out

    def sigma_inv(t, x):
        return np.eye(d) / scale(x)[..., None, None]

    return drift, drift_jac, drift_hess, sigma, sigma_jac, sigma_hess, sigma_inv


def _check_eps(eps):
    eps = float(eps)
    if not abs(eps) < 1:
        raise ValueError(f"|eps| must be < 1 for an invertible diffusion, got {eps}")
    return eps


@register("trig_multiplicative")
def _trig_multiplicative(eps=0.3, alpha=0.1, d=1):
    d = _dim(d)
    eps = _check_eps(eps)
    alpha = float(alpha)
    parts = _trig_parts(eps, alpha, d)
    K1 = max(abs(alpha), d * abs(eps))
    K2 = max(abs(alpha), math.sqrt(d) * abs(eps))
    return ModelSpec("trig_multiplicative", d, d, GeneratorSpec.zero(d), *parts,
                     _const(K1), _const(K2), _const(1.0 / (1.0 - abs(eps))), _const(K1),
                     {"eps": eps, "alpha": alpha, "d": d})


@register("linear_drift_const_sigma")
def _linear_drift_const_sigma(M=((0.0, 1.0), (0.0, 0.0)), sigma0=1.0):
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise ValueError("M must be a finite square matrix")
    d = M.shape[0]
    sigma0 = float(sigma0)
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")

    def drift(t, x):
        return x @ M.T

    def drift_jac(t, x):
        return np.broadcast_to(M, np.shape(x)[:-1] + (d, d))

    def zero_hess(t, x, u, w):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(w)))

    def sigma(t, x):
        return _eye(d, np.shape(x)[:-1], sigma0)

    def sigma_jac(t, x, k):
        return np.zeros(np.shape(x)[:-1] + (d, d))

    def sigma_inv(t, x):
        return _eye(d, np.shape(x)[:-1], 1.0 / sigma0)

    K1 = float(np.linalg.norm(M, 2))
    return ModelSpec("linear_drift_const_sigma", d, d, GeneratorSpec.zero(d), drift, drift_jac,
                     zero_hess, sigma, sigma_jac, _zero_sigma_hess, sigma_inv, _const(K1), _const(0.0),
                     _const(1.0 / sigma0), _const(K1), {"M": M.tolist(), "sigma0": sigma0})


@register("galerkin_diag")
def _galerkin_diag(eps=0.3, alpha=0.1, d=2, spectrum=None):
    d = _dim(d)
    eps = _check_eps(eps)
    alpha = float(alpha)
    if spectrum is None:
        spectrum = [float((i + 1) ** 2) for i in range(d)]
    mu = np.asarray(spectrum, dtype=float)
    if mu.shape != (d,):
        raise ValueError("spectrum must have length d")
    if np.any(mu < 0):
        raise ValueError("spectrum entries must be nonnegative")
    if np.any(np.diff(mu) < 0):
        raise ValueError("spectrum must be sorted ascending")
    parts = _trig_parts(eps, alpha, d)
    gaps = mu - mu[0]

    # conjugation scales Sigma^{(k)} by exp((mu_k - mu_1) t)
    def K1(t):
        return max(abs(alpha), abs(eps) * float(np.sum(np.exp(gaps * t))))

    def K2(t):
        return max(abs(alpha), abs(eps) * float(np.sqrt(np.sum(np.exp(2 * gaps * t)))))

    return ModelSpec("galerkin_diag", d, d, GeneratorSpec.diagonal(mu), *parts, K1, K2,
                     _const(1.0 / (1.0 - abs(eps))), K1,
                     {"eps": eps, "alpha": alpha, "d": d, "spectrum": mu.tolist()})
