"""Named experiment runners behind the CLI subcommands.

Each runner consumes a validated Experiment, derives its own seeded random
streams from the master seed, and returns (check rows, artifacts).  Check
rows are uniform `{check, scenario_id, metric, value, tolerance, pass}`
records; for lower-bounded metrics the tolerance column holds the bound and
`pass` means value >= tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import verify
from .bdsde import LsmcEnsemble, BdsdeProblem, solve_gbdsde_picard
from .config import Experiment, _build_init, _build_scenarios
from .errors import ConfigError
from .gbm import (
    TimeGrid,
    build_gbm,
    coarsen_driver,
    integral_diagnostics,
    sample_driver,
)
from .hunt import (
    InitialLaw,
    empirical_bracket,
    forward_integral_diagnostics,
    simulate_hunt,
)
from .pde import (
    GspdeProblem,
    PicardConfig,
    SpaceTimeTestFunction,
    discretize_operator,
    energy_identity_residual,
    solve_gspde_picard,
    weak_residual,
)
from .presets import build_field, integrand_values, shifted_reaction
from .scenario import enumerate_schedules
from ._util import SEED_DRIVER, SEED_HUNT, SEED_SCHEDULES, child_seed, parallel_map


@dataclass(frozen=True)
class CheckRow:
    check: str
    scenario_id: int
    metric: str
    value: float
    tolerance: float
    passed: bool


def _row(check, scenario_id, metric, value, tolerance, passed) -> CheckRow:
    return CheckRow(check, int(scenario_id), metric, float(value), float(tolerance),
                    bool(passed))


def _bool_row(check, scenario_id, metric, ok) -> CheckRow:
    return _row(check, scenario_id, metric, 1.0 if ok else 0.0, 1.0, ok)


# -- backward-integral diagnostics ------------------------------------------------

def run_gbm_check(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("gbm_check", {})
    scen = (_build_scenarios(sec["scenario_set"], "gbm_check.scenario_set")
            if "scenario_set" in sec else exp.scenarios)
    horizon = float(sec.get("horizon", exp.time_grid.horizon))
    n_steps = int(sec.get("n_steps", 256))
    n_paths = int(sec.get("n_paths", 4000))
    n_random = int(sec.get("n_random_schedules", 1))
    names = sec.get("integrands", ["constant", "step", "sin-t"])
    grid = TimeGrid(horizon, n_steps)
    driver = sample_driver(grid, n_paths, scen.dim,
                           child_seed(exp.seed, SEED_DRIVER))
    schedules = enumerate_schedules(scen, n_steps, n_random,
                                    child_seed(exp.seed, SEED_SCHEDULES))
    family = [build_gbm(driver, sched, scen) for sched in schedules]

    rows: list[CheckRow] = []
    reports = {}
    for name in names:
        xi = integrand_values(name, grid.times, scen.dim)
        rep = integral_diagnostics(xi, family)
        reports[name] = {
            "sigma_bar": rep.sigma_bar,
            "mean_abs_max": rep.mean_abs_max,
            "mean_band_3se": rep.mean_band,
            "second_moment": rep.second_moment,
            "isometry_bound": rep.isometry_bound,
            "sup_moment": rep.sup_moment,
            "doob_bound": rep.doob_bound,
            "per_scenario": [
                {"scenario_id": r.scenario_id, "mean_i0": r.mean_i0, "se_i0": r.se_i0,
                 "second_moment": r.second_moment, "sup_moment": r.sup_moment,
                 "xi_square": r.xi_square}
                for r in rep.per_scenario
            ],
        }
        rows.append(_row("gbm-integral", -1, f"mean_zero[{name}]",
                         rep.mean_abs_max, rep.mean_band, rep.mean_zero_ok))
        rows.append(_row("gbm-integral", -1, f"isometry[{name}]",
                         rep.second_moment, rep.isometry_bound, rep.isometry_ok))
        rows.append(_row("gbm-integral", -1, f"doob[{name}]",
                         rep.sup_moment, rep.doob_bound, rep.doob_ok))

    dump_n = min(int(sec.get("dump_paths", 4)), n_paths)
    dump_rows = []
    for paths in family[: scen.n_scenarios]:
        for p in range(dump_n):
            for i in range(n_steps):
                for j in range(scen.dim):
                    dump_rows.append((p, paths.scenario_id, i, j,
                                      float(paths.db[p, i, j])))
    artifacts = {
        "gbm_report.json": {"checks": reports, "n_paths": n_paths,
                            "n_steps": n_steps, "n_schedules": len(family)},
        "gbm_paths.csv": (["path_id", "scenario_id", "step", "coord", "dB_backward"],
                          dump_rows),
    }
    return rows, artifacts


# -- diffusion bracket --------------------------------------------------------------

def run_hunt_check(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("hunt_check", {})
    field = (build_field(sec["field"], exp.space_grid.dim, "hunt_check.field")
             if "field" in sec else exp.field)
    horizon = float(sec.get("horizon", exp.time_grid.horizon))
    n_steps = int(sec.get("n_steps", 512))
    n_paths = int(sec.get("n_paths", 4000))
    tol = float(sec.get("bracket_tolerance", 0.05))
    grid = TimeGrid(horizon, n_steps)
    init = _build_init(sec.get("init"), field.dim, "hunt_check.init")
    paths = simulate_hunt(field, init, grid, n_paths,
                          child_seed(exp.seed, SEED_HUNT))
    bracket = empirical_bracket(paths, field)
    phi = np.zeros((n_steps, field.dim))
    phi[:, 0] = 1.0
    forward = forward_integral_diagnostics(phi, paths, field)

    rows = [
        _row("hunt-bracket", -1, "max_rel_dev_diag",
             bracket.max_rel_dev_diag, tol, bracket.max_rel_dev_diag <= tol),
        _bool_row("hunt-bracket", -1, "offdiag_within_3se", bracket.offdiag_ok),
        _bool_row("hunt-forward", -1, "variance_sandwich", forward.sandwich_ok),
        _row("hunt-forward", -1, "mean_within_3se", abs(forward.mean_total),
             3.0 * forward.se_mean, abs(forward.mean_total) <= 3.0 * forward.se_mean),
    ]
    dump_n = min(int(sec.get("dump_paths", 4)), n_paths)
    dump_rows = []
    for p in range(dump_n):
        for i in range(n_steps):
            dump_rows.append((p, i)
                             + tuple(float(v) for v in paths.x[p, i])
                             + tuple(float(v) for v in paths.dm[p, i])
                             + (float(paths.weights[p]),))
    header = (["path_id", "step"]
              + [f"x_{k + 1}" for k in range(field.dim)]
              + [f"dM_{k + 1}" for k in range(field.dim)]
              + ["weight"])
    artifacts = {
        "hunt_report.json": {
            "max_rel_dev_diag": bracket.max_rel_dev_diag,
            "offdiag_ok": bracket.offdiag_ok,
            "forward_variance": forward.var_mc,
            "forward_model_variance": forward.model_variance,
            "forward_bounds": [forward.lower_bound, forward.upper_bound],
            "n_paths": n_paths,
            "n_steps": n_steps,
        },
        "hunt_paths.csv": (header, dump_rows),
    }
    return rows, artifacts


# -- grid equation ---------------------------------------------------------------

def _default_test_fn(exp: Experiment) -> SpaceTimeTestFunction:
    width = 0.25 * exp.space_grid.half_width
    horizon = exp.time_grid.horizon
    return SpaceTimeTestFunction(
        psi=lambda t: 1.0 - 0.5 * t / horizon,
        chi=lambda pts: np.exp(-0.5 * np.sum(pts**2, axis=1) / width**2),
        name="bump",
    )


def _scenario_bundles(exp: Experiment, n_paths: int, grid: TimeGrid, driver=None):
    if driver is None:
        driver = sample_driver(grid, n_paths, exp.scenarios.dim,
                               child_seed(exp.seed, SEED_DRIVER))
    return [build_gbm(driver, sched, exp.scenarios)
            for sched in enumerate_schedules(exp.scenarios, grid.n_steps)]


def run_gspde(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("gspde", {})
    n_b = int(sec.get("n_noise_paths", 8))
    weak_tol = float(sec.get("weak_tolerance", 0.1))
    energy_tol = float(sec.get("energy_tolerance", 0.1))
    problem, cfg = exp.gspde_problem, exp.gspde_cfg
    op = discretize_operator(problem.field, problem.space_grid)
    gbms = _scenario_bundles(exp, n_b, problem.time_grid)
    test_fn = _default_test_fn(exp)
    # Warm the step factorization before fanning out so workers only read it.
    op.cn_step(np.zeros(problem.space_grid.n_nodes), problem.time_grid.dt)

    def solve_one(gbm):
        fld, rep = solve_gspde_picard(problem, cfg, gbm, op=op)
        wres = weak_residual(fld, test_fn, problem, gbm, op=op)
        eres = energy_identity_residual(fld, problem, gbm, op=op)
        return fld, rep, wres, eres

    solved = parallel_map(solve_one, gbms, exp.threads)
    rows: list[CheckRow] = []
    scen_reports = []
    for gbm, (fld, rep, wres, eres) in zip(gbms, solved):
        sid = gbm.scenario_id
        max_ratio = max(rep.ratios) if rep.ratios else 0.0
        terminal_exact = all(np.array_equal(fld.values[p, -1], problem.terminal)
                             for p in range(fld.n_paths))
        w_rms = float(np.sqrt(np.mean(wres**2)))
        e_rms = float(np.sqrt(np.mean(eres**2)))
        rows.append(_bool_row("gspde", sid, "converged", rep.converged))
        rows.append(_row("gspde", sid, "contraction_ratio", max_ratio,
                         cfg.kappa + 0.05, max_ratio <= cfg.kappa + 0.05))
        rows.append(_bool_row("gspde", sid, "terminal_exact", terminal_exact))
        rows.append(_row("gspde", sid, "weak_residual_rms", w_rms, weak_tol,
                         w_rms <= weak_tol))
        rows.append(_row("gspde", sid, "energy_residual_rms", e_rms, energy_tol,
                         e_rms <= energy_tol))
        scen_reports.append({
            "scenario_id": sid,
            "iterations": rep.iterations,
            "increments": list(rep.increments),
            "ratios": list(rep.ratios),
            "final_norm": rep.final_norm,
            "weak_residual_rms": w_rms,
            "energy_residual_rms": e_rms,
        })

    dump_n = min(int(sec.get("dump_paths", 2)), n_b)
    dump_rows = []
    sg = problem.space_grid
    m = sg.points_per_axis
    stride = max(1, sg.n_nodes // 64)
    for gbm, (fld, _, _, _) in zip(gbms, solved):
        for p in range(dump_n):
            for i in range(problem.time_grid.n_steps + 1):
                t = float(problem.time_grid.times[i])
                for node in range(0, sg.n_nodes, stride):
                    axes = (node,) if sg.dim == 1 else (node // m, node % m)
                    dump_rows.append((p, gbm.scenario_id, t) + axes
                                     + (float(fld.values[p, i, node]),))
    index_cols = ["x_index"] if sg.dim == 1 else ["x_index_1", "x_index_2"]
    artifacts = {
        "gspde_report.json": {
            "kappa": cfg.kappa, "eps": cfg.eps, "gamma": cfg.gamma,
            "delta": cfg.delta, "per_scenario": scen_reports,
        },
        "gspde_solution.csv": (["path_id", "scenario_id", "t"] + index_cols + ["u"],
                               dump_rows),
    }
    return rows, artifacts


# -- backward solver ----------------------------------------------------------------

def run_gbdsde(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("bdsde", {})
    n_w = int(sec.get("n_diffusion_paths", 2000))
    n_b = int(exp.sections.get("gspde", {}).get("n_noise_paths", 8))
    problem, cfg = exp.bdsde_problem, exp.bdsde_cfg
    hunt = simulate_hunt(exp.field, exp.init_law, problem.time_grid, n_w,
                         child_seed(exp.seed, SEED_HUNT))
    ensemble = LsmcEnsemble(hunt, exp.basis, exp.field)
    gbms = _scenario_bundles(exp, n_b, problem.time_grid)

    rows: list[CheckRow] = []
    scen_reports = []
    solutions = []
    for gbm in gbms:
        sol = solve_gbdsde_picard(problem, hunt, gbm, exp.basis, cfg,
                                  ensemble=ensemble)
        rep = sol.picard_report
        sid = gbm.scenario_id
        max_ratio = max(rep.ratios) if rep.ratios else 0.0
        xi = np.asarray(problem.terminal_fn(hunt.x[:, -1, :]))
        terminal_exact = all(np.array_equal(sol.y[b, -1], xi)
                             for b in range(gbm.n_paths))
        rows.append(_bool_row("gbdsde", sid, "converged", rep.converged))
        rows.append(_row("gbdsde", sid, "contraction_ratio", max_ratio,
                         cfg.kappa + 0.05, max_ratio <= cfg.kappa + 0.05))
        rows.append(_bool_row("gbdsde", sid, "terminal_exact", terminal_exact))
        scen_reports.append({
            "scenario_id": sid,
            "iterations": rep.iterations,
            "increments": list(rep.increments),
            "ratios": list(rep.ratios),
            "final_norm": rep.final_norm,
        })
        solutions.append(sol)

    dump_b = min(int(sec.get("dump_paths", 2)), n_b)
    dump_w = min(8, n_w)
    dump_rows = []
    for gbm, sol in zip(gbms, solutions):
        for b in range(dump_b):
            for w in range(dump_w):
                for i in range(problem.time_grid.n_steps + 1):
                    t = float(problem.time_grid.times[i])
                    dump_rows.append((gbm.scenario_id, b, w, t, float(sol.y[b, i, w]))
                                     + tuple(float(v) for v in sol.z[b, i, w]))
    header = (["scenario_id", "b_path_id", "x_path_id", "t", "Y"]
              + [f"Z_{k + 1}" for k in range(hunt.dim)])
    artifacts = {
        "gbdsde_report.json": {
            "kappa": cfg.kappa, "eps": cfg.eps, "beta": cfg.beta,
            "delta": cfg.delta, "per_scenario": scen_reports,
        },
        "bdsde_solution.csv": (header, dump_rows),
    }
    return rows, artifacts


# -- representation -------------------------------------------------------------------

def _representation_level(exp: Experiment, grid: TimeGrid, driver, dw_hunt,
                          n_w: int, checkpoints):
    problem = GspdeProblem(exp.gspde_problem.terminal, exp.gspde_problem.reaction,
                           exp.gspde_problem.noise, exp.field, exp.scenarios,
                           grid, exp.space_grid)
    b_problem = BdsdeProblem(exp.bdsde_problem.terminal_fn, exp.bdsde_problem.f,
                             exp.bdsde_problem.g, exp.bdsde_problem.lip_k,
                             exp.bdsde_problem.lip_alpha, exp.field,
                             exp.scenarios, grid)
    op = discretize_operator(exp.field, exp.space_grid)
    hunt = simulate_hunt(exp.field, exp.init_law, grid, n_w,
                         child_seed(exp.seed, SEED_HUNT), dw=dw_hunt)
    ensemble = LsmcEnsemble(hunt, exp.basis, exp.field)
    gbms = [build_gbm(driver, sched, exp.scenarios)
            for sched in enumerate_schedules(exp.scenarios, grid.n_steps)]
    u_fields, sols = [], []
    for gbm in gbms:
        fld, _ = solve_gspde_picard(problem, exp.gspde_cfg, gbm, op=op)
        sol = solve_gbdsde_picard(b_problem, hunt, gbm, exp.basis, exp.bdsde_cfg,
                                  ensemble=ensemble)
        u_fields.append(fld)
        sols.append(sol)
    times = [f * grid.horizon for f in checkpoints]
    return verify.check_representation(u_fields, sols, hunt, gbms, times,
                                       field_spec=exp.field)


def run_representation(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("representation", {})
    fractions = sec.get("checkpoint_fractions", [0.0, 0.25, 0.5, 0.75])
    halvings = int(sec.get("halvings", 0))
    tol = float(sec.get("tolerance", 0.05))
    n_b = int(sec.get("n_noise_paths",
                      exp.sections.get("gspde", {}).get("n_noise_paths", 8)))
    n_w = int(sec.get("n_diffusion_paths",
                      exp.sections.get("bdsde", {}).get("n_diffusion_paths", 2000)))
    base = exp.time_grid
    finest = TimeGrid(base.horizon, base.n_steps * 2**halvings)
    driver_fine = sample_driver(finest, n_b, exp.scenarios.dim,
                                child_seed(exp.seed, SEED_DRIVER))
    rng = np.random.default_rng(child_seed(exp.seed, SEED_HUNT, 1))
    dw_fine = rng.standard_normal((n_w, finest.n_steps, exp.field.dim)) * np.sqrt(finest.dt)

    reports = []
    for level in range(halvings + 1):
        factor = 2 ** (halvings - level)
        grid = TimeGrid(base.horizon, base.n_steps * 2**level)
        driver = coarsen_driver(driver_fine, factor)
        dw = dw_fine.reshape(n_w, grid.n_steps, factor, exp.field.dim).sum(axis=2)
        reports.append(_representation_level(exp, grid, driver, dw, n_w, fractions))
    combined = verify.combine_refinement(reports) if halvings else reports[0]
    base_report = reports[0]

    rows = [_row("representation", -1, f"rel_rms_y[t={c.t:g}]", c.rel_rms_y, tol,
                 c.rel_rms_y <= tol) for c in base_report.checkpoints]
    if halvings:
        rows.append(_bool_row("representation", -1, "non_increasing",
                              bool(combined.non_increasing)))
    artifacts = {
        "representation_report.json": {
            "tolerance": tol,
            "checkpoints": [
                {"t": c.t, "rel_rms_y": c.rel_rms_y, "rel_rms_z": c.rel_rms_z,
                 "rel_rms_z_sigma": c.rel_rms_z_sigma, "ref_rms": c.ref_rms}
                for c in base_report.checkpoints
            ],
            "refinement": list(combined.refinement),
            "non_increasing": combined.non_increasing,
        },
    }
    return rows, artifacts


# -- comparison ---------------------------------------------------------------------

def run_comparison(exp: Experiment) -> tuple[list[CheckRow], dict]:
    sec = exp.sections.get("comparison", {})
    cases = sec.get("cases", [{"terminal_shift": 1.0, "reaction_shift": 0.0},
                              {"terminal_shift": 0.0, "reaction_shift": 0.1}])
    collar = float(sec.get("collar_frac", 0.05))
    n_b = int(exp.sections.get("gspde", {}).get("n_noise_paths", 8))
    problem_a, cfg = exp.gspde_problem, exp.gspde_cfg
    gbms = _scenario_bundles(exp, n_b, problem_a.time_grid)
    y_dependent = (problem_a.reaction.lip_sq > 0.0 or problem_a.noise.lip_y_sq > 0.0)

    rows: list[CheckRow] = []
    case_reports = []
    for idx, case in enumerate(cases):
        allowed = {"terminal_shift", "reaction_shift"}
        for k in case:
            if k not in allowed:
                raise ConfigError(f"comparison.cases[{idx}].{k}", "unknown key")
        t_shift = float(case.get("terminal_shift", 0.0))
        f_shift = float(case.get("reaction_shift", 0.0))
        problem_b = GspdeProblem(
            problem_a.terminal + t_shift,
            shifted_reaction(problem_a.reaction, f_shift),
            problem_a.noise, problem_a.field, problem_a.scenarios,
            problem_a.time_grid, problem_a.space_grid,
            check_boundary_decay=False,
        )
        report = verify.check_comparison(problem_a, problem_b, cfg, cfg, gbms,
                                         collar_frac=collar)
        expected = t_shift if not y_dependent else 0.0
        bound = expected - report.eps_grid
        rows.append(_row("comparison", -1, f"min_gap[case={idx}]",
                         report.min_gap, bound, report.min_gap >= bound))
        case_reports.append({
            "terminal_shift": t_shift, "reaction_shift": f_shift,
            "min_gap": report.min_gap, "eps_grid": report.eps_grid,
            "c_constant": report.c_constant, "expected_lower_bound": bound,
            "per_scenario": [{"scenario_id": s, "min_gap": g}
                             for s, g in report.per_scenario],
        })
    artifacts = {"comparison_report.json": {"collar_frac": collar,
                                            "cases": case_reports}}
    return rows, artifacts


# -- suite -------------------------------------------------------------------------

RUNNERS = {
    "gbm-integral": run_gbm_check,
    "hunt-bracket": run_hunt_check,
    "gspde": run_gspde,
    "gbdsde": run_gbdsde,
    "representation": run_representation,
    "comparison": run_comparison,
}


def run_suite(exp: Experiment) -> tuple[list[CheckRow], dict]:
    checks = exp.sections.get("suite", {}).get("checks", list(RUNNERS))
    rows: list[CheckRow] = []
    artifacts: dict = {}
    for name in checks:
        sub_rows, sub_artifacts = RUNNERS[name](exp)
        rows.extend(sub_rows)
        artifacts.update(sub_artifacts)
    artifacts["suite_report.json"] = {
        "checks_run": list(checks),
        "n_rows": len(rows),
        "all_passed": all(r.passed for r in rows),
    }
    return rows, artifacts
