import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from malliavin_mc.model import (GeneratorSpec, ModelEvaluationError, builtin_model, builtin_names,
                                build_conjugated, fd_derivative_errors, validate_assumptions)

SMOOTH = [
    ("trig_multiplicative", {"eps": 0.5, "alpha": 0.3, "d": 1}),
    ("trig_multiplicative", {"eps": 0.4, "alpha": 0.2, "d": 3}),
    ("galerkin_diag", {"eps": 0.4, "alpha": 0.2, "d": 2}),
]
ALL = SMOOTH + [("additive_gauss", {"sigma0": 2.0, "d": 2}),
                ("linear_drift_const_sigma", {"M": [[0.0, 1.0], [0.0, 0.0]], "sigma0": 1.0})]


def test_registry_names():
    assert builtin_names() == ["additive_gauss", "galerkin_diag", "linear_drift_const_sigma",
                               "trig_multiplicative"]


def test_unknown_model_and_bad_params():
    with pytest.raises(ValueError):
        builtin_model("nope")
    with pytest.raises(ValueError):
        builtin_model("trig_multiplicative", {"eps": 1.0})
    with pytest.raises(ValueError):
        builtin_model("additive_gauss", {"sigma0": -1.0})
    with pytest.raises(ValueError):
        builtin_model("galerkin_diag", {"d": 2, "spectrum": [-1.0, 2.0]})


def test_additive_example():
    m = builtin_model("additive_gauss", {"sigma0": 1.0, "d": 1})
    x = np.array([0.7])
    np.testing.assert_array_equal(m.sigma_inv(0.0, x), [[1.0]])
    np.testing.assert_array_equal(m.drift_jac(0.0, x), [[0.0]])


def test_trig_lambda_example():
    m = builtin_model("trig_multiplicative", {"eps": 0.5, "alpha": 0.0, "d": 1})
    assert m.lam(1.0) == pytest.approx(2.0)
    rep = validate_assumptions(m, 2000, 4.0, seed=1)
    assert rep.n_violations == 0


def test_lambda_violation_detected():
    m = builtin_model("trig_multiplicative", {"eps": 0.5, "alpha": 0.0, "d": 1, "lam": 1.5})
    rep = validate_assumptions(m, 2000, 4.0, seed=1)
    assert any(v["bound"] == "lambda" for v in rep.violations)
    worst = max(rep.violations, key=lambda v: v["value"])
    assert math.sin(worst["x"][0]) < -0.5


def test_additive_validates_with_zero_K1():
    m = builtin_model("additive_gauss", {"d": 2})
    assert m.K1(1.0) == 0.0
    rep = validate_assumptions(m, 200, 3.0, seed=2)
    assert rep.passed
    assert rep.to_dict()["declared_K"] == 0.0


@pytest.mark.parametrize("name,params", ALL)
def test_builtins_pass_validation(name, params):
    rep = validate_assumptions(builtin_model(name, params), 500, 4.0, seed=3)
    assert rep.passed, rep.violations[:3]


def test_nonfinite_coefficients_raise():
    from dataclasses import replace
    m = builtin_model("additive_gauss")
    bad = replace(m, sigma_inv=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), np.nan))
    with pytest.raises(ModelEvaluationError):
        validate_assumptions(bad, 5, 1.0, seed=0)


def test_linear_drift_hess_is_zero():
    m = builtin_model("linear_drift_const_sigma", {"M": [[0, 1], [0, 0]], "sigma0": 1.0})
    out = m.drift_hess(0.0, np.ones(2), np.array([1.0, 2.0]), np.array([3.0, -1.0]))
    np.testing.assert_array_equal(out, 0.0)


def test_zero_generator_conjugation_is_identity_map():
    m = builtin_model("linear_drift_const_sigma", {"M": [[0, 1], [0, 0]]})
    c = build_conjugated(m)
    x = np.array([0.3, -1.0])
    for t in (0.0, 0.7, 5.0):
        np.testing.assert_array_equal(c.B(t, x), [[0, 1], [0, 0]])


def test_diagonal_conjugation_example():
    # spectrum (1, 2) with grad b = [[0, 1], [0, 0]] at t = 1 gives [[0, e^{-1}], [0, 0]]
    from dataclasses import replace
    base = builtin_model("linear_drift_const_sigma", {"M": [[0, 1], [0, 0]]})
    m = replace(base, generator=GeneratorSpec.diagonal([1.0, 2.0]))
    c = build_conjugated(m)
    B = c.B(1.0, np.zeros(2))
    dense = c.semigroup_inv(1.0) @ base.drift_jac(1.0, np.zeros(2)) @ c.semigroup(1.0)
    np.testing.assert_allclose(B, [[0, math.exp(-1)], [0, 0]], rtol=1e-15)
    np.testing.assert_allclose(B, dense, rtol=1e-15)


def test_generator_validation():
    from dataclasses import replace
    base = builtin_model("additive_gauss", {"d": 2})
    with pytest.raises(ValueError):
        build_conjugated(replace(base, generator=GeneratorSpec("diagonal", (-1.0, 1.0))))
    with pytest.raises(ValueError):
        build_conjugated(replace(base, generator=GeneratorSpec("zero", (0.0, 1.0))))


def test_semigroup_product_is_identity():
    c = build_conjugated(builtin_model("galerkin_diag", {"d": 3}))
    for t in (0.0, 0.1, 2.0):
        np.testing.assert_array_equal(np.diag(c.semigroup(t) @ c.semigroup_inv(t)) == 1.0, True)


finite = st.floats(-3, 3, allow_nan=False)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
       st.lists(finite, min_size=3, max_size=3), st.floats(0, 2))
def test_conjugation_identities(x, u, w, t):
    m = builtin_model("galerkin_diag", {"d": 3, "eps": 0.4})
    c = build_conjugated(m)
    x, u, w = (np.array(z) for z in (x, u, w))
    E, Einv = c.semigroup(t), c.semigroup_inv(t)
    np.testing.assert_allclose(c.B(t, x), Einv @ m.drift_jac(t, x) @ E, rtol=1e-12, atol=1e-300)
    for k in range(3):
        np.testing.assert_allclose(c.Sigma_k(t, x, k), Einv @ m.sigma_jac(t, x, k) @ E,
                                   rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(c.Sigma_hess_k(t, x, k, u, w),
                                   Einv @ m.sigma_hess(t, x, k, E @ u, w), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(c.B_hess(t, x, u, w), Einv @ m.drift_hess(t, x, E @ u, w),
                               rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(c.B_hess(t, x, np.zeros(3), w), 0.0)


@pytest.mark.parametrize("name,params", SMOOTH)
def test_fd_hessian_second_order(name, params):
    m = builtin_model(name, params)
    rng = np.random.default_rng(4)
    d = m.d
    for _ in range(5):
        x, u, w = rng.standard_normal((3, d))
        e1 = fd_derivative_errors(m, 0.4, x, u, w, 1e-2)
        e2 = fd_derivative_errors(m, 0.4, x, u, w, 5e-3)
        for a, b in zip(e1, e2):
            if a > 1e-12:
                assert 3.5 <= a / b <= 4.5


@pytest.mark.parametrize("name,params", ALL)
def test_sigma_inverse(name, params):
    m = builtin_model(name, params)
    rng = np.random.default_rng(5)
    x = rng.uniform(-5, 5, (1000, m.d))
    prod = m.sigma_inv(0.3, x) @ m.sigma(0.3, x)
    np.testing.assert_allclose(prod, np.broadcast_to(np.eye(m.d), prod.shape), atol=1e-10)


@pytest.mark.parametrize("name,params", ALL)
def test_shapes_are_vectorised(name, params):
    m = builtin_model(name, params)
    x = np.zeros((4, 3, m.d))
    assert m.drift(0.0, x).shape == (4, 3, m.d)
    assert np.shape(m.drift_jac(0.0, x)) == (4, 3, m.d, m.d)
    assert m.sigma(0.0, x).shape == (4, 3, m.d, m.m)
    assert m.sigma_col(0.0, x, 0).shape == (4, 3, m.d)
    assert m.sigma_hess(0.0, x, 0, x, x).shape == (4, 3, m.d)


def test_k_overrides_replace_constants():
    m = builtin_model("trig_multiplicative", {"K1": 7.0, "K2": 8.0, "lam": 9.0})
    assert (m.K1(1.0), m.K2(1.0), m.lam(1.0)) == (7.0, 8.0, 9.0)


def test_galerkin_constants_nondecreasing():
    m = builtin_model("galerkin_diag", {"d": 3})
    ts = np.linspace(0, 2, 11)
    k1 = [m.K1(t) for t in ts]
    assert all(b >= a for a, b in zip(k1, k1[1:]))
