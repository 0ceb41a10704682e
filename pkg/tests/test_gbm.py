import numpy as np
import pytest

from gexplab.errors import UsageError
from gexplab.gbm import (
    TimeGrid,
    backward_integral,
    build_gbm,
    coarsen_driver,
    integral_diagnostics,
    refine_driver,
    sample_driver,
)
from gexplab.scenario import ControlSchedule, ScenarioSet, constant_schedule


def make_paths(matrices, n_paths=2000, n_steps=64, horizon=1.0, seed=101, k=0):
    s = ScenarioSet.from_list(matrices)
    grid = TimeGrid(horizon, n_steps)
    driver = sample_driver(grid, n_paths, s.dim, seed)
    return build_gbm(driver, constant_schedule(k, n_steps), s)


def test_driver_determinism_and_stats():
    grid = TimeGrid(1.0, 1)
    a = sample_driver(grid, 10_000, 2, seed=42)
    b = sample_driver(grid, 10_000, 2, seed=42)
    assert np.array_equal(a.increments, b.increments)
    var = np.var(a.increments, axis=0, ddof=1)
    assert np.all(np.abs(var - grid.dt) < 0.05 * grid.dt)
    assert np.all(np.abs(np.mean(a.increments, axis=0)) < 5e-2)


def test_driver_rejects_zero_paths():
    with pytest.raises(UsageError):
        sample_driver(TimeGrid(1.0, 4), 0, 1, seed=0)


def test_zero_scenario_gives_zero_paths():
    paths = make_paths([[[0.0]]], n_paths=16, n_steps=8)
    assert np.all(paths.db == 0.0)


def test_identity_loading_is_negated_reversed_driver():
    s = ScenarioSet.from_list([[[1.0]]])
    grid = TimeGrid(1.0, 16)
    driver = sample_driver(grid, 8, 1, seed=5)
    paths = build_gbm(driver, constant_schedule(0, 16), s)
    assert np.array_equal(paths.db, -driver.increments[:, ::-1, :])


def test_constructional_identity_mixed_schedule():
    rng = np.random.default_rng(9)
    s = ScenarioSet.from_list([rng.standard_normal((2, 2)) for _ in range(3)])
    grid = TimeGrid(2.0, 12)
    driver = sample_driver(grid, 5, 2, seed=7)
    sched = ControlSchedule(rng.integers(0, 3, size=12))
    paths = build_gbm(driver, sched, s)
    n = grid.n_steps
    for i in range(n):
        beta = s.matrices[sched.indices[i]]
        expected = -driver.increments[:, n - 1 - i, :] @ beta.T
        assert np.array_equal(paths.db[:, i, :], expected)


def test_gbm_variance_scaling():
    # Var(B_0 - B_T) = 4 T for the single scenario beta = [2].
    paths = make_paths([[[2.0]]], n_paths=10_000, n_steps=1, horizon=0.7, seed=3)
    var = float(np.var(paths.levels()[:, 0, 0], ddof=1))
    assert abs(var - 4.0 * 0.7) < 0.05 * 4.0 * 0.7


def test_schedule_length_mismatch():
    s = ScenarioSet.from_list([[[1.0]]])
    driver = sample_driver(TimeGrid(1.0, 8), 4, 1, seed=0)
    with pytest.raises(UsageError):
        build_gbm(driver, constant_schedule(0, 9), s)


def test_backward_integral_zero_and_constant():
    paths = make_paths([[[1.0]]], n_paths=32, n_steps=16)
    n = paths.grid.n_steps
    zero = backward_integral(np.zeros((n + 1, 1)), paths)
    assert np.all(zero == 0.0)
    const = backward_integral(np.full((n + 1, 1), 2.5), paths)
    levels = paths.levels()
    # Telescoping: I_t = c (B_t - B_T).
    assert np.allclose(const, 2.5 * levels[:, :, 0], atol=1e-12)
    assert np.all(const[:, -1] == 0.0)


def test_backward_integral_two_step_defining_sum():
    # Oracle: direct evaluation of the defining double sum for N = 2.
    paths = make_paths([[[1.3]]], n_paths=6, n_steps=2)
    xi = np.array([[0.0], [0.7], [-1.2]])
    out = backward_integral(xi, paths)
    expected0 = 0.7 * paths.db[:, 0, 0] + (-1.2) * paths.db[:, 1, 0]
    expected1 = (-1.2) * paths.db[:, 1, 0]
    assert np.allclose(out[:, 0], expected0, atol=1e-14)
    assert np.allclose(out[:, 1], expected1, atol=1e-14)
    assert np.all(out[:, 2] == 0.0)


def test_backward_integral_linearity_per_path():
    paths = make_paths([[[1.0]], [[0.5]]], n_paths=11, n_steps=10, k=1)
    rng = np.random.default_rng(0)
    xi1 = rng.standard_normal((11, 11, 1))
    xi2 = rng.standard_normal((11, 1))
    alpha = 1.7
    lhs = backward_integral(alpha * xi1 + xi2, paths)
    rhs = alpha * backward_integral(xi1, paths) + backward_integral(xi2, paths)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_backward_integral_column_mismatch():
    paths = make_paths([np.eye(2)], n_paths=4, n_steps=8)
    with pytest.raises(UsageError):
        backward_integral(np.ones((9, 1)), paths)


def test_diagnostics_zero_integrand():
    paths = make_paths([[[1.0]]], n_paths=64, n_steps=8)
    rep = integral_diagnostics(np.zeros((9, 1)), paths)
    assert rep.mean_abs_max == 0.0
    assert rep.second_moment == 0.0
    assert rep.isometry_bound == 0.0
    assert rep.mean_zero_ok and rep.isometry_ok and rep.doob_ok


def test_diagnostics_classical_isometry():
    # Singleton family, constant integrand: E[I_0^2] = T exactly.
    t_hor = 0.8
    paths = make_paths([[[1.0]]], n_paths=40_000, n_steps=32, horizon=t_hor, seed=21)
    n = paths.grid.n_steps
    rep = integral_diagnostics(np.ones((n + 1, 1)), paths)
    assert rep.mean_zero_ok
    assert abs(rep.second_moment - t_hor) < 0.02 * t_hor
    assert rep.isometry_ok and rep.doob_ok


def test_diagnostics_two_scenarios_bound_saturates():
    s = ScenarioSet.from_list([[[1.0]], [[2.0]]])
    grid = TimeGrid(0.5, 16)
    driver = sample_driver(grid, 40_000, 1, seed=33)
    fam = [build_gbm(driver, constant_schedule(k, 16), s) for k in range(2)]
    rep = integral_diagnostics(np.ones((17, 1)), fam)
    # Extremal scenario attains sigma_bar^2 T = 4 T.
    assert rep.sigma_bar == pytest.approx(2.0)
    assert abs(rep.second_moment - 4.0 * 0.5) < 0.03 * 4.0 * 0.5
    assert rep.isometry_bound == pytest.approx(4.0 * 0.5)
    assert rep.isometry_ok and rep.doob_ok and rep.mean_zero_ok


def test_quadratic_variation_bounded_by_sigma_bar():
    rng = np.random.default_rng(14)
    s = ScenarioSet.from_list([rng.standard_normal((2, 2)) for _ in range(3)])
    grid = TimeGrid(1.0, 64)
    driver = sample_driver(grid, 4000, 2, seed=15)
    from gexplab.scenario import sigma_bar

    bound = sigma_bar(s) ** 2 * grid.horizon
    sched = ControlSchedule(rng.integers(0, 3, size=64))
    paths = build_gbm(driver, sched, s)
    qv = np.sum(paths.db**2, axis=1)  # per path, per coordinate
    mean = qv.mean(axis=0)
    se = qv.std(axis=0, ddof=1) / np.sqrt(qv.shape[0])
    assert np.all(mean <= bound + 3.0 * se)


def test_refine_and_coarsen_roundtrip():
    grid = TimeGrid(1.0, 8)
    driver = sample_driver(grid, 5, 2, seed=1)
    fine = refine_driver(driver, 4)
    assert fine.grid.n_steps == 32
    back = coarsen_driver(fine, 4)
    assert np.allclose(back.increments, driver.increments, atol=1e-12)
    with pytest.raises(UsageError):
        coarsen_driver(driver, 3)
