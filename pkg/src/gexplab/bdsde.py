"""Backward doubly stochastic solver: regression Monte Carlo over a diffusion
ensemble with the noise path frozen.

Per (scenario, noise path) the conditional expectations are least-squares
regressions on the diffusion state only; noise-path quantities enter the
targets as constants.  The backward recursion is

    Y_i = E[ Y_{i+1} + dt f(t_{i+1}) + g(t_{i+1}) . dB_i | X_i ],
    Z_i = (2 dt)^{-1} a(X_i)^{-1} E[ Y_{i+1} dM_i | X_i ],

where the Z scaling comes from the bracket <M> = 2 int a(X) ds.  Y at the
horizon is the terminal payoff bitwise; Z at the horizon copies the last
regressed slot and is flagged, not extrapolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, UsageError
from .gbm import GBMPaths, TimeGrid
from .hunt import CoefficientField, HuntPaths
from .pde import pick_epsilon
from .scenario import ScenarioSet, sigma_bar
from ._util import exp_weights

MIN_SAMPLES_PER_FEATURE = 10
DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class RegressionBasis:
    """Feature basis for the conditional-expectation regressions.

    ``polynomial``: total-degree monomials of the standardized state (any
    state dimension).  ``indicator-bins``: equal-count bins, 1-D state only.
    The ridge penalty never shrinks the intercept, so constants always fit
    exactly when ridge = 0.
    """

    kind: str = "polynomial"
    degree: int = 4
    n_bins: int = 16
    ridge: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "indicator-bins"):
            raise UsageError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise UsageError("polynomial degree must be >= 0")
        if self.kind == "indicator-bins" and self.n_bins < 1:
            raise UsageError("need at least one bin")
        if self.ridge < 0.0:
            raise UsageError("ridge must be nonnegative")


def _monomial_powers(dim: int, degree: int) -> list[tuple]:
    powers = [()]
    out = []

    def rec(prefix, remaining, budget):
        if remaining == 0:
            out.append(tuple(prefix))
            return
        for k in range(budget + 1):
            rec(prefix + [k], remaining - 1, budget - k)

    rec([], dim, degree)
    out.sort(key=lambda p: (sum(p), p))
    return out


class RegressionContext:
    """Design matrix and factorized normal equations for one state sample.

    Built once per time slot and reused for every target (Y updates, Z
    moment regressions, all noise paths): fits are matrix products.
    """

    def __init__(self, positions: np.ndarray, basis: RegressionBasis):
        x = np.asarray(positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise UsageError("positions must be (n_samples, state_dim)")
        self.positions = x
        self.basis = basis
        n, d = x.shape
        self.center = x.mean(axis=0)
        spread = x.std(axis=0)
        self.active = spread > DEGENERATE_STD
        self.scale = np.where(self.active, spread, 1.0)
        if basis.kind == "polynomial":
            a_dim = int(np.sum(self.active))
            self.powers = _monomial_powers(a_dim, basis.degree) if a_dim else [()]
            self.edges = None
        else:
            if d != 1:
                raise UsageError("indicator-bins basis supports 1-D state only")
            if not self.active[0]:
                self.powers = [()]
                self.edges = None
            else:
                qs = np.linspace(0.0, 1.0, basis.n_bins + 1)[1:-1]
                self.edges = np.quantile(x[:, 0], qs)
                self.powers = None
        phi = self._design(x)
        n_feat = phi.shape[1]
        if n < MIN_SAMPLES_PER_FEATURE * n_feat:
            raise UsageError(
                f"need at least {MIN_SAMPLES_PER_FEATURE} samples per basis "
                f"function ({n} samples, {n_feat} features)"
            )
        penalty = np.full(n_feat, basis.ridge)
        if basis.kind == "polynomial":
            penalty[0] = 0.0  # never shrink the intercept
        gram = phi.T @ phi + np.diag(penalty)
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
            raise NumericalError(
                f"regression design is rank deficient (eig ratio {eigs[0]:.3e}/"
                f"{eigs[-1]:.3e}); reduce the basis or add ridge"
            )
        self.phi = phi
        self._chol = sla.cho_factor(gram)
        self.gram = gram

    @property
    def n_features(self) -> int:
        return self.phi.shape[1]

    def _design(self, x: np.ndarray) -> np.ndarray:
        if self.basis.kind == "indicator-bins" and self.edges is not None:
            idx = np.searchsorted(self.edges, x[:, 0])
            phi = np.zeros((x.shape[0], self.basis.n_bins))
            phi[np.arange(x.shape[0]), idx] = 1.0
            return phi
        z = (x - self.center) / self.scale
        z = z[:, self.active] if z.shape[1] else z
        cols = []
        for pw in self.powers:
            col = np.ones(x.shape[0])
            for axis_id, p in enumerate(pw):
                if p:
                    col = col * z[:, axis_id] ** p
            cols.append(col)
        return np.stack(cols, axis=1)

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """Coefficients for targets with shape (..., n_samples)."""
        t = np.asarray(targets, dtype=float)
        rhs = t @ self.phi                       # (..., n_features)
        flat = rhs.reshape(-1, self.n_features)
        coefs = sla.cho_solve(self._chol, flat.T).T
        return coefs.reshape(t.shape[:-1] + (self.n_features,))

    def predict_in_sample(self, coefs: np.ndarray) -> np.ndarray:
        return np.asarray(coefs) @ self.phi.T

    def predict_at(self, coefs: np.ndarray, positions: np.ndarray) -> np.ndarray:
        x = np.asarray(positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return np.asarray(coefs) @ self._design(x).T


@dataclass(frozen=True)
class ConditionalPredictor:
    """Fitted conditional expectation, evaluable anywhere."""

    context: RegressionContext = field(repr=False)
    coefficients: np.ndarray
    residual_std: float
    se_coefficients: np.ndarray

    def predict(self, positions) -> np.ndarray:
        return self.context.predict_at(self.coefficients, positions)

    @property
    def fitted(self) -> np.ndarray:
        return self.context.predict_in_sample(self.coefficients)


def regress_conditional(targets, positions, basis: RegressionBasis,
                        context: Optional[RegressionContext] = None) -> ConditionalPredictor:
    """Least-squares conditional expectation of targets given the state."""
    t = np.asarray(targets, dtype=float).ravel()
    ctx = context if context is not None else RegressionContext(positions, basis)
    if t.shape[0] != ctx.positions.shape[0]:
        raise UsageError("targets and positions have different sample counts")
    coefs = ctx.fit(t)
    resid = t - ctx.predict_in_sample(coefs)
    dof = max(t.shape[0] - ctx.n_features, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * sla.cho_solve(ctx._chol, np.eye(ctx.n_features))
    return ConditionalPredictor(ctx, coefs, float(np.sqrt(sigma2)),
                                np.sqrt(np.maximum(np.diag(cov), 0.0)))


class LsmcEnsemble:
    """Per-time-slot regression contexts plus coefficient caches for one
    diffusion ensemble."""

    def __init__(self, hunt: HuntPaths, basis: RegressionBasis,
                 field_spec: CoefficientField):
        self.hunt = hunt
        self.basis = basis
        self.field = field_spec
        n = hunt.grid.n_steps
        self.contexts = [RegressionContext(hunt.x[:, i, :], basis) for i in range(n)]
        self.a_values = np.stack([field_spec.a_at(hunt.x[:, i, :]) for i in range(n)])
        self.a_inverse = np.linalg.inv(self.a_values)          # (n, n_W, d, d)
        self.sigma = np.stack([field_spec.sigma_at(hunt.x[:, i, :])
                               for i in range(n + 1)])         # (n+1, n_W, d, d)


def extract_z(next_values, dm, a_values=None, positions=None,
              basis: Optional[RegressionBasis] = None, dt: float = 0.0,
              context: Optional[RegressionContext] = None,
              a_inverse: Optional[np.ndarray] = None, center: bool = True) -> np.ndarray:
    """Martingale-representation estimate of Z at one time slot.

    Z(x) = (2 dt)^{-1} a(x)^{-1} E[next dM | X = x], one regression per
    martingale coordinate; returns samples shaped like next_values + (d,).
    Either (a_values, positions, basis) or (context, a_inverse) must be
    supplied.

    With ``center`` the fitted conditional mean of ``next`` is subtracted
    before multiplying by dM.  The subtracted part is X-measurable, so the
    estimated conditional expectation is unchanged, but the Monte Carlo
    variance drops from the value scale to the increment scale.
    """
    if dt <= 0.0:
        raise UsageError("dt must be positive")
    nxt = np.asarray(next_values, dtype=float)
    dm = np.asarray(dm, dtype=float)
    n, d = dm.shape
    ctx = context if context is not None else RegressionContext(positions, basis)
    if center:
        nxt = nxt - ctx.predict_in_sample(ctx.fit(nxt))
    moments = np.empty(nxt.shape + (d,))
    for j in range(d):
        coefs = ctx.fit(nxt * dm[:, j])
        moments[..., j] = ctx.predict_in_sample(coefs)
    ainv = a_inverse if a_inverse is not None else np.linalg.inv(np.asarray(a_values))
    try:
        z = np.einsum("njk,...nk->...nj", ainv, moments) / (2.0 * dt)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by ellipticity
        raise NumericalError(f"coefficient matrix inversion failed: {exc}") from exc
    return z


@dataclass(frozen=True)
class BdsdePicardReport:
    converged: bool
    iterations: int
    increments: tuple
    ratios: tuple
    kappa: float
    eps: float
    beta: float
    delta: float
    tol_rel: float
    final_norm: float


@dataclass(frozen=True)
class BdsdeSolution:
    """Y, Z over (noise path, time, diffusion path) for one scenario."""

    y: np.ndarray = field(repr=False)   # (n_b, n_steps+1, n_W)
    z: np.ndarray = field(repr=False)   # (n_b, n_steps+1, n_W, d)
    time_grid: TimeGrid
    scenario_id: int
    weights: np.ndarray = field(repr=False)
    hunt_fingerprint: tuple = ()
    gbm_fingerprint: tuple = ()
    terminal_z_copied: bool = True
    picard_report: Optional[BdsdePicardReport] = None


def _broadcast_driver(values, n_b: int, n_slots: int, n_w: int, trailing=()):
    """Accept (n_b, slots, n_W[, l]) or (slots, n_W[, l]) or None."""
    target = (n_b, n_slots, n_w) + trailing
    if values is None:
        return np.zeros(target)
    arr = np.asarray(values, dtype=float)
    if arr.shape == target[1:]:
        arr = np.broadcast_to(arr, target)
    if arr.shape != target:
        raise UsageError(f"driver data has shape {arr.shape}, expected {target}")
    return arr


def solve_linear_bdsde(f_vals, g_vals, xi_vals, ensemble, gbm: GBMPaths,
                       basis: Optional[RegressionBasis] = None,
                       field_spec: Optional[CoefficientField] = None) -> BdsdeSolution:
    """Backward recursion for given (y, z)-independent driver data.

    ``f_vals`` and ``g_vals`` are slot arrays aligned with the time grid
    (slot i+1 pairs with dB_i); ``xi_vals`` is the terminal payoff on the
    diffusion ensemble.  ``ensemble`` is an LsmcEnsemble, or a HuntPaths
    given ``basis`` and ``field_spec``.
    """
    if isinstance(ensemble, HuntPaths):
        if basis is None or field_spec is None:
            raise UsageError("building an ensemble needs a basis and a coefficient field")
        ensemble = LsmcEnsemble(ensemble, basis, field_spec)
    hunt = ensemble.hunt
    if hunt.grid != gbm.grid:
        raise UsageError("diffusion ensemble and noise paths use different time grids")
    n, n_w, d = hunt.grid.n_steps, hunt.n_paths, hunt.dim
    n_b, l = gbm.n_paths, gbm.dim
    dt = hunt.grid.dt
    xi = np.asarray(xi_vals, dtype=float)
    if xi.shape != (n_w,):
        raise UsageError(f"terminal payoff has shape {xi.shape}, expected ({n_w},)")
    f_arr = _broadcast_driver(f_vals, n_b, n + 1, n_w)
    g_arr = _broadcast_driver(g_vals, n_b, n + 1, n_w, (l,))

    y = np.empty((n_b, n + 1, n_w))
    z = np.empty((n_b, n + 1, n_w, d))
    y[:, n] = xi
    for i in range(n - 1, -1, -1):
        ctx = ensemble.contexts[i]
        target = y[:, i + 1] + dt * f_arr[:, i + 1]
        target = target + np.einsum("bwl,bl->bw", g_arr[:, i + 1], gbm.db[:, i, :])
        y[:, i] = ctx.predict_in_sample(ctx.fit(target))
        z[:, i] = extract_z(y[:, i + 1], hunt.dm[:, i], dt=dt,
                            context=ctx, a_inverse=ensemble.a_inverse[i])
    z[:, n] = z[:, n - 1]
    return BdsdeSolution(y, z, hunt.grid, gbm.scenario_id, hunt.weights,
                         hunt.fingerprint(), gbm.fingerprint())


def delta_norm(solutions, beta: float, delta: float) -> float:
    """sup over solutions of sqrt(delta E int e^{beta s}|Y|^2 + E int e^{beta s}|Z|^2).

    The expectation is the importance-weighted mean over diffusion paths and
    the plain mean over noise paths; left-endpoint slots with exact
    exponential step weights.
    """
    if isinstance(solutions, BdsdeSolution):
        solutions = [solutions]
    if len(solutions) == 0:
        raise UsageError("need at least one solution")
    best = 0.0
    for sol in solutions:
        best = max(best, _delta_norm_arrays(sol.y, sol.z, sol.time_grid, beta, delta,
                                            sol.weights))
    return float(np.sqrt(best))


def _delta_norm_arrays(y, z, tg: TimeGrid, beta: float, delta: float,
                       weights=None) -> float:
    w_t = exp_weights(beta, tg.times)
    yy = np.asarray(y)[:, :-1, :]
    zz = np.asarray(z)[:, :-1, :, :]
    dens = delta * yy**2 + np.sum(zz**2, axis=-1)
    if weights is not None:
        # Importance weights for Lebesgue initial mass enter unnormalized.
        dens = dens * np.asarray(weights)[None, None, :]
    return float(np.mean(np.sum(np.mean(dens, axis=-1) * w_t[None, :], axis=-1)))


@dataclass
class BdsdeProblem:
    """Driver data with declared Lipschitz constants.

    Drivers have signature fn(t, x, y, v) with x the diffusion state sample
    (state dependence is how the drivers are random over the forward
    factor); the v slot is fed Z sigma(X).
    """

    terminal_fn: Callable[[np.ndarray], np.ndarray]
    f: Callable
    g: Callable
    lip_k: float
    lip_alpha: float
    field: CoefficientField
    scenarios: ScenarioSet
    time_grid: TimeGrid

    def __post_init__(self):
        sb2 = sigma_bar(self.scenarios) ** 2
        margin = 2.0 * self.field.lam_min - self.lip_alpha * self.field.lam_max * sb2
        if margin <= 0.0:
            raise UsageError(
                "contraction property violated: alpha * Lambda * sigma_bar^2 = "
                f"{self.lip_alpha * self.field.lam_max * sb2:.6g} >= 2 lambda = "
                f"{2 * self.field.lam_min:.6g}"
            )

    @property
    def sigma_bar(self) -> float:
        return sigma_bar(self.scenarios)

    def contraction_margin(self) -> float:
        return (2.0 * self.field.lam_min
                - self.lip_alpha * self.field.lam_max * self.sigma_bar**2)


@dataclass(frozen=True)
class BdsdePicardConfig:
    """Contraction constants of the outer fixed-point loop.

    kappa = (K eps + alpha Lambda sigma_bar^2) / (2 lambda) < 1 and
    delta = (beta - 1/eps) / (2 lambda) = K (eps + sigma_bar^2) / (2 lambda kappa).
    """

    eps: float
    beta: float
    delta: float
    kappa: float
    max_iter: int = 20
    tol_rel: float = 1e-6
    implicit_y: bool = False

    @classmethod
    def from_problem(cls, problem: BdsdeProblem, eps: Optional[float] = None,
                     margin: float = 0.1, max_iter: int = 20, tol_rel: float = 1e-6,
                     implicit_y: bool = False) -> "BdsdePicardConfig":
        k, alpha = problem.lip_k, problem.lip_alpha
        lam, lam_up = problem.field.lam_min, problem.field.lam_max
        sb2 = problem.sigma_bar**2
        z_coef = alpha * lam_up * sb2
        if eps is None:
            eps = pick_epsilon(k, z_coef, lam, margin)
        if eps <= 0.0:
            raise UsageError("epsilon must be positive")
        kappa = (k * eps + z_coef) / (2.0 * lam)
        if kappa >= 1.0:
            raise UsageError(f"kappa = {kappa:.6g} >= 1; decrease epsilon")
        delta = k * (eps + sb2) / (k * eps + z_coef) if k > 0 else 1.0
        beta = 1.0 / eps + 2.0 * lam * delta
        return cls(eps, beta, delta, kappa, max_iter, tol_rel, implicit_y)


def _eval_drivers(problem: BdsdeProblem, y, z, ensemble: "LsmcEnsemble"):
    """Driver values at every slot; v = Z sigma(X) feeds the z argument."""
    v = np.einsum("biwd,iwdk->biwk", z, ensemble.sigma)
    times = problem.time_grid.times
    n_b, n_slots, n_w = y.shape
    f_out = np.empty((n_b, n_slots, n_w))
    g_out = None
    for i in range(n_slots):
        x_here = ensemble.hunt.x[:, i, :]
        f_out[:, i] = np.asarray(problem.f(times[i], x_here, y[:, i], v[:, i]))
        g_i = np.asarray(problem.g(times[i], x_here, y[:, i], v[:, i]))
        if g_out is None:
            g_out = np.empty((n_b, n_slots, n_w, g_i.shape[-1]))
        g_out[:, i] = g_i
    return f_out, g_out


def _implicit_sweep(problem: BdsdeProblem, ensemble: LsmcEnsemble, gbm: GBMPaths,
                    xi: np.ndarray, f_arr: np.ndarray, g_arr: np.ndarray,
                    z_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Implicit-in-Y recursion: the noise loading and the z slot stay frozen
    at the previous iterate, while the reaction is moved to the left
    endpoint and evaluated at a one-sweep predictor of Y_i."""
    hunt = ensemble.hunt
    n, n_w, d = hunt.grid.n_steps, hunt.n_paths, hunt.dim
    n_b = gbm.n_paths
    dt = hunt.grid.dt
    times = hunt.grid.times
    y = np.empty((n_b, n + 1, n_w))
    z = np.empty((n_b, n + 1, n_w, d))
    y[:, n] = xi
    for i in range(n - 1, -1, -1):
        ctx = ensemble.contexts[i]
        base_target = y[:, i + 1] + np.einsum("bwl,bl->bw", g_arr[:, i + 1],
                                              gbm.db[:, i, :])
        stacked = np.stack([base_target, base_target + dt * f_arr[:, i + 1]])
        fitted = ctx.predict_in_sample(ctx.fit(stacked))
        base, pred = fitted[0], fitted[1]
        v_here = np.einsum("bwd,wdk->bwk", z_prev[:, i], ensemble.sigma[i])
        y[:, i] = base + dt * np.asarray(
            problem.f(times[i], hunt.x[:, i, :], pred, v_here))
        z[:, i] = extract_z(y[:, i + 1], hunt.dm[:, i], dt=dt,
                            context=ctx, a_inverse=ensemble.a_inverse[i])
    z[:, n] = z[:, n - 1]
    return y, z


def solve_gbdsde_picard(problem: BdsdeProblem, hunt: HuntPaths, gbm: GBMPaths,
                        basis: RegressionBasis,
                        cfg: Optional[BdsdePicardConfig] = None,
                        ensemble: Optional[LsmcEnsemble] = None) -> BdsdeSolution:
    """Outer fixed-point loop: each iteration freezes the drivers at the
    previous (Y, Z) and solves the resulting linear equation by regression.

    Convergence is monitored in the (beta, delta)-norm of the increments,
    relative to the iterate norm; the report carries the ratio history.
    """
    if cfg is None:
        cfg = BdsdePicardConfig.from_problem(problem)
    if hunt.grid != problem.time_grid or gbm.grid != problem.time_grid:
        raise UsageError("ensembles and problem use different time grids")
    if ensemble is None:
        ensemble = LsmcEnsemble(hunt, basis, problem.field)
    n, n_w, d = hunt.grid.n_steps, hunt.n_paths, hunt.dim
    n_b = gbm.n_paths
    xi = np.asarray(problem.terminal_fn(hunt.x[:, n, :]), dtype=float).reshape(n_w)

    y = np.zeros((n_b, n + 1, n_w))
    z = np.zeros((n_b, n + 1, n_w, d))
    increments: list[float] = []
    ratios: list[float] = []
    converged = False
    final_norm = 0.0
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        f_vals, g_vals = _eval_drivers(problem, y, z, ensemble)
        if cfg.implicit_y:
            y_new, z_new = _implicit_sweep(problem, ensemble, gbm, xi, f_vals,
                                           g_vals, z)
        else:
            sol = solve_linear_bdsde(f_vals, g_vals, xi, ensemble, gbm)
            y_new, z_new = sol.y, sol.z
        inc = np.sqrt(_delta_norm_arrays(y_new - y, z_new - z, problem.time_grid,
                                         cfg.beta, cfg.delta, hunt.weights))
        increments.append(float(inc))
        if len(increments) >= 2 and increments[-2] > 0.0:
            ratios.append(increments[-1] / increments[-2])
        y, z = y_new, z_new
        final_norm = np.sqrt(_delta_norm_arrays(y, z, problem.time_grid,
                                                cfg.beta, cfg.delta, hunt.weights))
        if inc <= cfg.tol_rel * max(final_norm, 1e-300):
            converged = True
            break

    report = BdsdePicardReport(converged, iterations, tuple(increments), tuple(ratios),
                               cfg.kappa, cfg.eps, cfg.beta, cfg.delta, cfg.tol_rel,
                               float(final_norm))
    if not converged:
        raise NumericalError(
            f"outer Picard loop did not converge in {cfg.max_iter} iterations "
            f"(last increment {increments[-1]:.3e})", report=report)
    return BdsdeSolution(y, z, problem.time_grid, gbm.scenario_id, hunt.weights,
                         hunt.fingerprint(), gbm.fingerprint(),
                         terminal_z_copied=True, picard_report=report)
