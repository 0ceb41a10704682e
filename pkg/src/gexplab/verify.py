"""Cross-module verification: the pathwise representation of the grid
solution, ordering of solutions under ordered data, and the transport
identity for purely noise-driven fields.

Every check runs per scenario and reports the worst case; every check takes
the shared path bundles explicitly and refuses mismatched randomness, so a
re-run under the same seed reproduces the report bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bdsde import BdsdeSolution
from .errors import UsageError
from .gbm import GBMPaths, coarsen_gbm
from .hunt import CoefficientField, HuntPaths
from .pde import (
    DivergenceFormOperator,
    GspdeProblem,
    NoiseTerm,
    PicardConfig,
    RandomField,
    SpatialGrid,
    ZERO_REACTION,
    discretize_operator,
    solve_gspde_picard,
)
from .gbm import TimeGrid
from .scenario import ScenarioSet

REL_RMS_FLOOR = 1e-12


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _checkpoint_indices(checkpoints, grid: TimeGrid) -> list[int]:
    out = []
    for t in checkpoints:
        idx = int(round(t / grid.dt))
        if idx < 0 or idx > grid.n_steps or abs(idx * grid.dt - t) > 1e-9 * max(1.0, grid.horizon):
            raise UsageError(f"checkpoint {t} is not a grid time")
        out.append(idx)
    return out


def _interp_paths(grid_values: np.ndarray, sg: SpatialGrid, points: np.ndarray) -> np.ndarray:
    if sg.dim != 1:
        raise UsageError("path interpolation of grid fields is 1-D only")
    return np.interp(points, sg.axis(), grid_values)


@dataclass(frozen=True)
class CheckpointMetrics:
    t: float
    rel_rms_y: float
    rel_rms_z: float
    rel_rms_z_sigma: float
    ref_rms: float


@dataclass(frozen=True)
class RepresentationReport:
    """Worst-case (over scenarios) relative RMS errors at the checkpoints,
    plus a refinement table across step counts when several runs are
    combined."""

    checkpoints: tuple
    per_scenario: tuple = field(repr=False)
    tolerance: float = 0.05
    refinement: tuple = ()

    @property
    def worst_rel_rms_y(self) -> float:
        return max(c.rel_rms_y for c in self.checkpoints)

    @property
    def passed(self) -> bool:
        return self.worst_rel_rms_y <= self.tolerance

    @property
    def non_increasing(self) -> Optional[bool]:
        if len(self.refinement) < 2:
            return None
        ok = True
        for prev, cur in zip(self.refinement, self.refinement[1:]):
            for t, v in cur["rel_rms_y"].items():
                ok &= v <= prev["rel_rms_y"][t] + 1e-12
        return bool(ok)


def _check_provenance(u_field: RandomField, sol: BdsdeSolution,
                      hunt: HuntPaths, gbm: GBMPaths) -> None:
    if u_field.gbm_fingerprint != gbm.fingerprint():
        raise UsageError("grid solution was built from different noise paths")
    if sol.gbm_fingerprint != gbm.fingerprint():
        raise UsageError("backward solution was built from different noise paths")
    if sol.hunt_fingerprint != hunt.fingerprint():
        raise UsageError("backward solution was built from a different diffusion ensemble")
    if u_field.time_grid != gbm.grid or sol.time_grid != gbm.grid:
        raise UsageError("time grids of the two solves do not match")


def representation_errors(u_field: RandomField, sol: BdsdeSolution,
                          hunt: HuntPaths, gbm: GBMPaths,
                          checkpoints: Sequence[float],
                          field_spec: Optional[CoefficientField] = None) -> list[CheckpointMetrics]:
    """Relative RMS of u(t, X_t) - Y_t and grad u(t, X_t) - Z_t for one
    scenario at the requested grid times."""
    _check_provenance(u_field, sol, hunt, gbm)
    sg = u_field.space_grid
    indices = _checkpoint_indices(checkpoints, u_field.time_grid)
    out = []
    for idx in indices:
        pos = hunt.x[:, idx, 0]
        err_y, ref_y, err_z, ref_z, err_zs, ref_zs = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
        sig = None
        if field_spec is not None:
            sig = field_spec.sigma_at(hunt.x[:, idx, :])[:, 0, 0]
        for b in range(u_field.n_paths):
            u_here = _interp_paths(u_field.values[b, idx], sg, pos)
            grad_here = _interp_paths(sg.gradient(u_field.values[b, idx])[:, 0], sg, pos)
            dy = u_here - sol.y[b, idx]
            dz = grad_here - sol.z[b, idx, :, 0]
            err_y += float(np.mean(dy**2))
            ref_y += float(np.mean(u_here**2))
            err_z += float(np.mean(dz**2))
            ref_z += float(np.mean(grad_here**2))
            if sig is not None:
                err_zs += float(np.mean((dz * sig) ** 2))
                ref_zs += float(np.mean((grad_here * sig) ** 2))
        ref_rms = np.sqrt(ref_y / u_field.n_paths)
        out.append(CheckpointMetrics(
            t=float(u_field.time_grid.times[idx]),
            rel_rms_y=float(np.sqrt(err_y / u_field.n_paths) / max(ref_rms, REL_RMS_FLOOR)),
            rel_rms_z=float(np.sqrt(err_z / max(ref_z, REL_RMS_FLOOR))),
            rel_rms_z_sigma=float(np.sqrt(err_zs / max(ref_zs, REL_RMS_FLOOR)))
            if sig is not None else float("nan"),
            ref_rms=float(ref_rms),
        ))
    return out


def check_representation(u_fields, sols, hunt: HuntPaths, gbms,
                         checkpoints: Sequence[float], tolerance: float = 0.05,
                         field_spec: Optional[CoefficientField] = None) -> RepresentationReport:
    """Worst case across scenarios; inputs are per-scenario sequences (or
    single objects) sharing one diffusion ensemble."""
    u_list, s_list, g_list = _as_list(u_fields), _as_list(sols), _as_list(gbms)
    if not (len(u_list) == len(s_list) == len(g_list)) or not u_list:
        raise UsageError("need matching non-empty per-scenario sequences")
    per_scenario = []
    for u, s, g in zip(u_list, s_list, g_list):
        per_scenario.append((g.scenario_id,
                             representation_errors(u, s, hunt, g, checkpoints, field_spec)))
    worst = []
    for j, t in enumerate(checkpoints):
        rows = [metrics[j] for _, metrics in per_scenario]
        worst.append(CheckpointMetrics(
            t=float(t),
            rel_rms_y=max(r.rel_rms_y for r in rows),
            rel_rms_z=max(r.rel_rms_z for r in rows),
            rel_rms_z_sigma=max(r.rel_rms_z_sigma for r in rows),
            ref_rms=min(r.ref_rms for r in rows),
        ))
    row = {
        "n_steps": u_list[0].time_grid.n_steps,
        "rel_rms_y": {c.t: c.rel_rms_y for c in worst},
        "rel_rms_z": {c.t: c.rel_rms_z for c in worst},
    }
    return RepresentationReport(tuple(worst), tuple(per_scenario), tolerance, (row,))


def combine_refinement(reports: Sequence[RepresentationReport]) -> RepresentationReport:
    """Merge per-resolution reports, coarsest first, into one report whose
    refinement table orders the step counts."""
    if not reports:
        raise UsageError("need at least one report")
    rows = [r for rep in reports for r in rep.refinement]
    rows.sort(key=lambda r: r["n_steps"])
    finest = max(reports, key=lambda r: r.refinement[0]["n_steps"])
    return RepresentationReport(finest.checkpoints, finest.per_scenario,
                                finest.tolerance, tuple(rows))


# -- comparison ---------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    min_gap: float
    eps_grid: float
    c_constant: float
    collar_frac: float
    per_scenario: tuple

    def passes(self, expected_shift: float = 0.0) -> bool:
        return self.min_gap >= expected_shift - self.eps_grid


def _sample_ordering(problem_a: GspdeProblem, problem_b: GspdeProblem,
                     y_range=(-2.0, 2.0), z_range=(-2.0, 2.0), n_samples: int = 5) -> None:
    sg, tg = problem_a.space_grid, problem_a.time_grid
    psi_gap = problem_b.terminal - problem_a.terminal
    if float(np.min(psi_gap)) < -1e-12:
        raise UsageError("terminal data are not ordered: min(psi_b - psi_a) < 0")
    pts = sg.points()
    ys = np.linspace(*y_range, n_samples)
    zs = np.linspace(*z_range, n_samples)
    for t in (0.0, 0.5 * tg.horizon, tg.horizon):
        for yv in ys:
            for zv in zs:
                y = np.full(sg.n_nodes, yv)
                z = np.full((sg.n_nodes, sg.dim), zv)
                gap = np.asarray(problem_b.reaction(t, pts, y, z)) - \
                    np.asarray(problem_a.reaction(t, pts, y, z))
                if float(np.min(gap)) < -1e-12:
                    raise UsageError(
                        f"reaction terms are not ordered at t={t}, y={yv}, z={zv}"
                    )


def check_comparison(problem_a: GspdeProblem, problem_b: GspdeProblem,
                     cfg_a: PicardConfig, cfg_b: PicardConfig, gbms,
                     collar_frac: float = 0.05) -> ComparisonReport:
    """Solve both ordered problems on shared noise and report the worst
    signed gap min(u_b - u_a) over the collar interior, with a measured
    grid-error scale from a step-doubling probe on the gap field."""
    if problem_a.noise is not problem_b.noise:
        raise UsageError("comparison requires the two problems to share the noise term")
    if problem_a.space_grid != problem_b.space_grid or problem_a.time_grid != problem_b.time_grid:
        raise UsageError("comparison requires matching grids")
    _sample_ordering(problem_a, problem_b)
    sg = problem_a.space_grid
    mask = sg.interior_mask(collar_frac)
    op_a = discretize_operator(problem_a.field, sg)
    per_scenario = []
    min_gap = np.inf
    probe = 0.0
    for gbm in _as_list(gbms):
        fa, _ = solve_gspde_picard(problem_a, cfg_a, gbm, op=op_a)
        fb, _ = solve_gspde_picard(problem_b, cfg_b, gbm, op=op_a)
        gap = (fb.values - fa.values)[:, :, mask]
        scen_min = float(np.min(gap))
        per_scenario.append((gbm.scenario_id, scen_min))
        min_gap = min(min_gap, scen_min)
        if gbm.grid.n_steps % 2 == 0:
            coarse = coarsen_gbm(gbm, 2)
            prob_ac = _regrid_problem(problem_a, coarse.grid)
            prob_bc = _regrid_problem(problem_b, coarse.grid)
            fac, _ = solve_gspde_picard(prob_ac, cfg_a, coarse, op=op_a)
            fbc, _ = solve_gspde_picard(prob_bc, cfg_b, coarse, op=op_a)
            gap_c = (fbc.values - fac.values)[:, :, mask]
            probe = max(probe, float(np.max(np.abs(gap[:, ::2] - gap_c))))
    eps_grid = 2.0 * probe + 1e-12
    scale = problem_a.time_grid.dt + sg.dx**2
    return ComparisonReport(min_gap=min_gap, eps_grid=eps_grid,
                            c_constant=eps_grid / scale, collar_frac=collar_frac,
                            per_scenario=tuple(per_scenario))


def _regrid_problem(problem: GspdeProblem, tg: TimeGrid) -> GspdeProblem:
    return GspdeProblem(problem.terminal, problem.reaction, problem.noise,
                        problem.field, problem.scenarios, tg, problem.space_grid,
                        check_boundary_decay=False)


# -- linear transport ----------------------------------------------------------

@dataclass(frozen=True)
class TransportReport:
    checkpoints: tuple       # (t, rel_rms) pairs, worst over scenarios
    per_scenario: tuple = field(repr=False)
    refinement: tuple = ()

    @property
    def worst_rel_rms(self) -> float:
        return max(v for _, v in self.checkpoints)

    @property
    def non_increasing(self) -> Optional[bool]:
        if len(self.refinement) < 2:
            return None
        ok = True
        for prev, cur in zip(self.refinement, self.refinement[1:]):
            for t, v in cur["rel_rms"].items():
                ok &= v <= prev["rel_rms"][t] + 1e-12
        return bool(ok)


def check_linear_transport(noise: NoiseTerm, field_spec: CoefficientField,
                           time_grid: TimeGrid, space_grid: SpatialGrid,
                           hunt: HuntPaths, gbms, scenarios: ScenarioSet,
                           checkpoints: Sequence[float] = (0.0,),
                           op: Optional[DivergenceFormOperator] = None) -> TransportReport:
    """Both sides of the pathwise identity for u = sum P g . dB: the field
    evaluated along the diffusion equals the backward noise sum minus the
    forward gradient integral.  The noise term must be deterministic in
    (y, z)."""
    if noise.lip_y_sq != 0.0 or noise.lip_z_sq != 0.0:
        raise UsageError("transport check needs a (y, z)-independent noise term")
    if hunt.grid != time_grid:
        raise UsageError("diffusion ensemble and time grid do not match")
    sg = space_grid
    if op is None:
        op = discretize_operator(field_spec, sg)
    zero_terminal = np.zeros(sg.n_nodes)
    indices = _checkpoint_indices(checkpoints, time_grid)
    pts_grid = sg.points()
    n = time_grid.n_steps
    times = time_grid.times
    n_w = hunt.n_paths
    zero_y = np.zeros(n_w)
    zero_z = np.zeros((n_w, hunt.dim))
    # Noise samples along the diffusion, g(t_{i+1}, X_{t_i}), shape (n, n_w, l).
    g_on_paths = np.stack([
        np.asarray(noise(times[i + 1], hunt.x[:, i, :], zero_y, zero_z))
        for i in range(n)
    ])
    per_scenario = []
    worst = {idx: 0.0 for idx in indices}
    for gbm in _as_list(gbms):
        problem = GspdeProblem(zero_terminal, ZERO_REACTION, noise, field_spec,
                               scenarios, time_grid, sg, check_boundary_decay=False)
        cfg = PicardConfig.from_problem(problem, eps=1.0, max_iter=6)
        u_field, _ = solve_gspde_picard(problem, cfg, gbm, op=op)
        grads = sg.gradient(u_field.values)[:, :, :, 0]        # (b, n+1, nodes)
        rows = {}
        for idx in indices:
            res_sq, ref_sq = 0.0, 0.0
            for b in range(gbm.n_paths):
                lhs = _interp_paths(u_field.values[b, idx], sg, hunt.x[:, idx, 0])
                back = np.zeros(n_w)
                for i in range(idx, n):
                    back += g_on_paths[i] @ gbm.db[b, i, :]
                forward = np.zeros(n_w)
                for i in range(idx, n):
                    z_here = _interp_paths(grads[b, i], sg, hunt.x[:, i, 0])
                    forward += z_here * hunt.dm[:, i, 0]
                resid = lhs - (back - forward)
                res_sq += float(np.mean(resid**2))
                ref_sq += float(np.mean(lhs**2))
            rel = float(np.sqrt(res_sq / max(ref_sq, REL_RMS_FLOOR)))
            rows[idx] = rel
            worst[idx] = max(worst[idx], rel)
        per_scenario.append((gbm.scenario_id, {times[i]: v for i, v in rows.items()}))
    checkpoints_out = tuple((float(times[i]), worst[i]) for i in indices)
    row = {"n_steps": n, "rel_rms": {float(times[i]): worst[i] for i in indices}}
    return TransportReport(checkpoints_out, tuple(per_scenario), (row,))


def combine_transport(reports: Sequence[TransportReport]) -> TransportReport:
    if not reports:
        raise UsageError("need at least one report")
    rows = [r for rep in reports for r in rep.refinement]
    rows.sort(key=lambda r: r["n_steps"])
    finest = max(reports, key=lambda r: r.refinement[0]["n_steps"])
    return TransportReport(finest.checkpoints, finest.per_scenario, tuple(rows))
