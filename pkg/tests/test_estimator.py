import numpy as np
import pytest
from hypothesis import given, strategies as st

from malliavin_mc import estimator as est
from malliavin_mc.flow import TimeGrid
from malliavin_mc.model import builtin_model

ADD = builtin_model("additive_gauss", {"sigma0": 1.0})
TRIG1 = builtin_model("trig_multiplicative", {"eps": 0.3, "alpha": 0.1, "d": 1})
TRIG2 = builtin_model("trig_multiplicative", {"eps": 0.3, "alpha": 0.1, "d": 2})


def test_estimate_from_samples():
    e = est.Estimate.from_samples(np.array([1.0, 2.0, 3.0, 4.0]), 7)
    assert e.mean == 2.5
    assert e.std_error == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert e.to_dict() == {"mean": 2.5, "std_error": e.std_error, "n": 4, "seed": 7}


@pytest.mark.parametrize("name", est.available_test_functions())
def test_test_function_gradients_match_finite_differences(name):
    tf = est.get_test_function(name)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.5, 1.5, (20, 2))
    h = 1e-6
    g = tf.grad_f(x)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (tf.f(x + e) - tf.f(x - e)) / (2 * h)
        np.testing.assert_allclose(g[:, i], fd, rtol=1e-6, atol=1e-7)


def test_unknown_test_function():
    with pytest.raises(ValueError):
        est.get_test_function("nope")


def test_additive_ibp_small():
    rep = est.verify_ibp(ADD, [0.0], [1.0], TimeGrid(1.0, 100), "x1", 4000, seed=1)
    assert rep.lhs.mean == 1.0 and rep.lhs.std_error == 0.0
    assert abs(rep.z) < 4


def test_zero_direction_has_zero_weight_mean():
    rep = est.verify_ibp(TRIG1, [0.5], [0.0], TimeGrid(1.0, 50), "sin_x1", 1000, seed=2)
    assert rep.rhs.mean == 0.0
    assert rep.lhs.mean == 0.0
    assert all(m == 0.0 for m in rep.theta_means)


def test_trig_ibp_moderate():
    rep = est.verify_ibp(TRIG1, [0.5], [1.0], TimeGrid(1.0, 200), "sin_x1", 20000, seed=3)
    assert abs(rep.z) < 4, rep.to_dict()


def test_galerkin_ibp_small():
    m = builtin_model("galerkin_diag", {"d": 2})
    reps = est.verify_ibp_many(m, [0.5, -0.3], [1.0, 0.5], TimeGrid(1.0, 200),
                               ["sin_x1", "sin_mixed"], 10000, seed=4)
    for rep in reps:
        assert abs(rep.z) < 4, rep.to_dict()


def test_threads_do_not_change_results():
    grid = TimeGrid(1.0, 50)
    a = est.verify_ibp(TRIG2, [0.5, -0.3], [1.0, 0.5], grid, "sin_x1", 1200, seed=5,
                       opts=est.RunOptions(threads=1, batch_size=250))
    b = est.verify_ibp(TRIG2, [0.5, -0.3], [1.0, 0.5], grid, "sin_x1", 1200, seed=5,
                       opts=est.RunOptions(threads=4, batch_size=250))
    assert a.to_dict() == b.to_dict()


def test_batch_size_does_not_change_results():
    grid = TimeGrid(1.0, 30)
    a = est.sample_weights(TRIG2, [0.5, -0.3], [1.0, 0.5], grid, 700, 6,
                           opts=est.RunOptions(batch_size=100))
    b = est.sample_weights(TRIG2, [0.5, -0.3], [1.0, 0.5], grid, 700, 6,
                           opts=est.RunOptions(batch_size=700))
    np.testing.assert_array_equal(a.total, b.total)
    np.testing.assert_array_equal(a.X_T, b.X_T)


def test_run_options_validation():
    with pytest.raises(ValueError):
        est.RunOptions(threads=0)
    with pytest.raises(ValueError):
        est.RunOptions(batch_size=0)
    with pytest.raises(ValueError):
        est.RunOptions(bracket="nope")


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        est.verify_ibp(TRIG2, [0.5], [1.0, 0.5], TimeGrid(1.0, 10), "x1", 100, seed=0)
    with pytest.raises(ValueError):
        est.verify_ibp(TRIG2, [0.5, 0.1], [1.0], TimeGrid(1.0, 10), "x1", 100, seed=0)


def test_refinement_report_checks():
    rep = est.ibp_refinement(TRIG1, [0.5], [1.0], 1.0, ["sin_x1"], 4000, seed=7,
                             n_steps_list=[50, 100])
    (c,) = rep.checks()
    assert c["f"] == "sin_x1"
    assert len(c["abs_diff"]) == 2
    assert isinstance(c["no_growth"], bool)


def test_spectral_norm():
    rng = np.random.default_rng(2)
    for d in (1, 2, 3):
        a = rng.standard_normal((30, d, d))
        np.testing.assert_allclose(est.spectral_norm(a), np.linalg.norm(a, 2, axis=(1, 2)),
                                   rtol=1e-10)


def test_moment_bounds_small():
    rep = est.check_moment_bounds(TRIG1, [0.5], TimeGrid(1.0, 100), [2, 4], 500, seed=8)
    assert rep.passed
    assert len(rep.rows()) == 2
    with pytest.raises(ValueError):
        est.check_moment_bounds(TRIG1, [0.5], TimeGrid(1.0, 10), [1.5], 10, seed=8)


def test_weight_moment_additive():
    rep = est.check_weight_moment(ADD, [0.0], [1.0], TimeGrid(1.0, 100), 4000, seed=9)
    assert rep.passed
    assert abs(rep.mean_abs.mean - np.sqrt(2 / np.pi)) < 4 * rep.mean_abs.std_error
    out = rep.to_dict()
    assert [t["term"] for t in out["terms"]] == ["theta1", "theta2", "theta3", "theta4", "theta5"]


def test_density_guards():
    grid = TimeGrid(1.0, 10)
    with pytest.raises(ValueError):
        est.density_log_gradient(ADD, [0.0], [1.0], grid, 999, 0, [[0.0]])
    m4 = builtin_model("additive_gauss", {"d": 4})
    with pytest.raises(ValueError):
        est.density_log_gradient(m4, [0.0] * 4, [1.0] * 4, grid, 2000, 0, [[0.0] * 4])
    with pytest.raises(ValueError):
        est.density_log_gradient(ADD, [0.0], [1.0], grid, 1000, 0, [[0.0]], bandwidth=-1.0)


def test_density_additive_small():
    ys = np.array([[-1.0], [0.0], [1.0], [8.0]])
    rep = est.density_log_gradient(ADD, [0.0], [1.0], TimeGrid(1.0, 50), 20000, 10, ys)
    assert np.all(np.abs(rep.est_grad_log_p[:3] + ys[:3, 0]) < 0.2)
    assert not rep.reliable[3]
    assert rep.reliable[:3].all()


def test_silverman_and_nadaraya_watson():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5000, 1))
    h = est.silverman_bandwidth(x)
    assert h.shape == (1,) and 0.1 < h[0] < 0.3
    fit, mass = est.nadaraya_watson(x, 2 * x[:, 0], np.array([[0.5]]), h)
    assert fit[0] == pytest.approx(1.0, abs=0.1)
    assert mass[0] > 0


def test_perturbation_additive_exact():
    rep = est.perturbation_check(ADD, [0.0], [1.0], TimeGrid(1.0, 100), 0, [1e-2, 5e-3])
    assert max(rep.defects) < 1e-10
    assert rep.passed


def test_perturbation_trig_shrinks():
    rep = est.perturbation_check(TRIG1, [0.5], [1.0], TimeGrid(1.0, 500), 0, [1e-2, 5e-3])
    assert rep.defects[1] < rep.defects[0]
    assert rep.within_envelope


def test_random_semilinear_systems_reproducible():
    a = est.random_semilinear_systems(3, 2, seed=5)
    b = est.random_semilinear_systems(3, 2, seed=5)
    assert [z.shape for z in a] == [(3, 2, 2), (3, 2, 2), (3, 2, 2, 2), (3, 2, 2, 2), (3, 2, 2)]
    for xa, xb in zip(a, b):
        np.testing.assert_array_equal(xa, xb)
    assert np.abs(a[0]).max() <= 0.5


def test_integrating_factor_study_small():
    rep = est.integrating_factor_study(n_systems=4, dims=(1,), seeds=(0, 1), levels=(100, 200))
    (s,) = rep.summary()
    assert s["p"] == 1 and len(s["ratios"]) == 2  # one per seed


def test_inverse_flow_defect_decreases():
    res = est.inverse_flow_defect_study(TRIG1, [0.5], 1.0, [100, 200, 400], 50, seed=11)
    assert len(res["ratios"]) == 2
    assert all(r > 1.3 for r in res["ratios"])
    add = est.inverse_flow_defect_study(ADD, [0.0], 1.0, [10, 20], 10, seed=0)
    assert max(add["defects"]) == 0.0
    assert np.isnan(add["ratios"]).all()


@given(st.integers(0, 1000), st.integers(1, 5), st.integers(1, 400))
def test_blocks_cover_paths_in_order(start_seed, threads, n_paths):
    opts = est.RunOptions(threads=threads, batch_size=37)
    out = est.run_blocks(lambda s, c: np.arange(s, s + c), n_paths, opts)
    np.testing.assert_array_equal(np.concatenate(out), np.arange(n_paths))
