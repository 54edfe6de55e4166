"""Weighted-least-squares state estimation and chi-square bad-data detection.

The estimator is a constant-gain Gauss-Newton iteration: the measurement
Jacobian is built once at the initial state and the resulting gain is
reused for every update. Fixed points therefore satisfy
J0' W (z - h(x)) = 0 with J0 the initial-state Jacobian. Convergence is
declared at the first update with infinity-norm at or below ``tol``; the
iteration then keeps refining while updates keep shrinking so the returned
state sits at the numerical fixed point rather than one tolerance-width
away from it.

When no initial state is supplied the estimator linearizes at the grid's
nominal operating state, the power-flow solution of the bus load and
generation setpoints. This keeps the frozen current-magnitude sensitivities
aligned with real operating conditions; at a flat start an unloaded branch
carries only its shunt charging, so those rows would point along a
direction the actual flows never excite and the residual statistic would
run hot. A grid with all-zero setpoints linearizes at the flat start, and
so does a grid whose nominal power flow fails to converge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaincc

from .grid import GridModel, MeasurementPlan
from .powerflow import (
    NonConvergenceError,
    StateVector,
    measurement_function,
    measurement_jacobian,
    solve_power_flow,
)

WLS_TOLERANCE = 1e-8
WLS_MAX_ITER = 50
THRESHOLD_BISECTION_TOL = 1e-10
# Refinement below this update norm is float noise; stop polishing.
_REFINE_FLOOR = 1e-14
# Give up polishing after this many updates in a row with no new best;
# the contraction can wobble, so a single non-improving step is not final.
_REFINE_PATIENCE = 3


class EstimationError(Exception):
    """Base class for estimation failures."""


class RankDeficiencyError(EstimationError):
    """The measurement plan cannot observe the full state."""


class EstimationNonConvergenceError(EstimationError):
    """The WLS iteration never met its convergence criterion."""


@dataclass
class EstimationResult:
    """Converged estimate with the solver's bookkeeping."""

    x_hat: StateVector
    objective: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class BddVerdict:
    """Chi-square bad-data decision for one measurement vector."""

    statistic: float
    dof: int
    alpha: float
    threshold: float
    flagged: bool


@lru_cache(maxsize=64)
def reference_state(grid: GridModel) -> StateVector:
    """Nominal operating state used as the default linearization point.

    Solves the power flow at the bus load and generation setpoints; a grid
    whose nominal solve does not converge falls back to the flat start.
    """
    injections = {
        bus.id: (bus.p_gen - bus.p_load, bus.q_gen - bus.q_load)
        for bus in grid.buses
        if bus.id != grid.slack_bus
    }
    try:
        return solve_power_flow(grid, injections)
    except NonConvergenceError:
        return StateVector.flat(grid.n_buses)


def wls_estimate(
    z: np.ndarray,
    grid: GridModel,
    init: StateVector | None = None,
    tol: float = WLS_TOLERANCE,
    max_iter: int = WLS_MAX_ITER,
) -> EstimationResult:
    """Minimize the weighted squared residual of ``z`` over the free state.

    Raises RankDeficiencyError when the plan is too small or the
    initial-state Jacobian loses column rank, and
    EstimationNonConvergenceError when no update reaches ``tol`` within
    ``max_iter`` iterations.
    """
    z = np.asarray(z, dtype=float)
    n = grid.n_buses
    n_states = grid.n_states
    m = len(grid.measurement_plan)
    if z.shape != (m,):
        raise ValueError(f"measurement vector has shape {z.shape}, plan expects ({m},)")
    if m < n_states:
        raise RankDeficiencyError(f"{m} measurements cannot observe {n_states} states")

    if init is None:
        init = reference_state(grid)
    jac0 = measurement_jacobian(init, grid)
    if np.linalg.matrix_rank(jac0) < n_states:
        raise RankDeficiencyError("measurement Jacobian is rank-deficient at the initial state")

    weights = 1.0 / grid.measurement_plan.sigmas() ** 2
    jtw = jac0.T * weights
    try:
        gain = cho_factor(jtw @ jac0)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"normal equations not positive definite: {exc}") from exc

    x = init.free(grid.slack_bus)
    converged = False
    best_step = np.inf
    x_best = x
    stall = 0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        r = z - measurement_function(
            StateVector.from_free(x, n, grid.slack_bus), grid
        )
        dx = cho_solve(gain, jtw @ r)
        x = x + dx
        step = float(np.max(np.abs(dx)))
        if step <= tol:
            converged = True
        if step < best_step:
            best_step = step
            x_best = x
            stall = 0
        else:
            stall += 1
        if converged and (step <= _REFINE_FLOOR or stall >= _REFINE_PATIENCE):
            break

    if not converged:
        raise EstimationNonConvergenceError(
            f"no update reached {tol} within {max_iter} iterations (best {best_step:.3e})"
        )
    x_hat = StateVector.from_free(x_best, n, grid.slack_bus)
    r = z - measurement_function(x_hat, grid)
    objective = float(np.sum(weights * r * r))
    return EstimationResult(x_hat=x_hat, objective=objective, iterations=iterations, converged=True)


def residual(z: np.ndarray, x_hat: StateVector, grid: GridModel) -> np.ndarray:
    """Element-wise z - h(x_hat) in plan order."""
    return np.asarray(z, dtype=float) - measurement_function(x_hat, grid)


def chi_square_statistic(r: np.ndarray, plan: MeasurementPlan) -> float:
    """Sum of squared sigma-normalized residuals."""
    sigmas = plan.sigmas()
    r = np.asarray(r, dtype=float)
    if r.shape != sigmas.shape:
        raise ValueError(f"residual has shape {r.shape}, plan expects {sigmas.shape}")
    scaled = r / sigmas
    return float(scaled @ scaled)


def chi_square_threshold(dof: int, alpha: float) -> float:
    """Upper-tail chi-square quantile: the t with P(chi2_dof >= t) = alpha.

    Inverts the regularized upper incomplete gamma function by bisection
    to an interval width of 1e-10.
    """
    if dof < 1:
        raise ValueError(f"dof must be at least 1, got {dof}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly between 0 and 1, got {alpha}")

    def upper_tail(t: float) -> float:
        return float(gammaincc(dof / 2.0, t / 2.0))

    lo = 0.0
    hi = float(dof) + 10.0
    while upper_tail(hi) > alpha:
        hi *= 2.0
    while hi - lo > THRESHOLD_BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if upper_tail(mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bdd_test(z: np.ndarray, grid: GridModel, alpha: float = 0.05) -> BddVerdict:
    """Estimate the state from ``z`` and run the chi-square residual test."""
    result = wls_estimate(z, grid)
    r = residual(z, result.x_hat, grid)
    statistic = chi_square_statistic(r, grid.measurement_plan)
    dof = len(grid.measurement_plan) - grid.n_states
    threshold = chi_square_threshold(dof, alpha)
    return BddVerdict(
        statistic=statistic,
        dof=dof,
        alpha=alpha,
        threshold=threshold,
        flagged=bool(statistic >= threshold),
    )
