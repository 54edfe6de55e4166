"""AC network physics: line flows, bus injections, measurement models, power flow.

All quantities are per-unit on the grid's MVA base, angles in radians.
Line-flow conventions (including the sign the shunt susceptance carries in
the reactive flow) follow the measurement model used across this package;
see ``line_flow`` for the exact expressions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .grid import (
    AdmittanceMatrix,
    Branch,
    GridModel,
    MeasurementKind,
    build_admittance,
)

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 30
# Below this apparent power a current magnitude has no usable derivative
# (the square root has a kink at zero), so Jacobian rows are zeroed.
CURRENT_KINK_FLOOR = 1e-12


class PowerFlowError(Exception):
    """Base class for power-flow and measurement-model failures."""


class NonConvergenceError(PowerFlowError):
    """Newton iteration failed to reach the mismatch tolerance."""


class DivergenceError(NonConvergenceError):
    """Non-convergence with a clear runaway signature: the mismatch grew
    several iterations in a row, the Jacobian went singular, or a voltage
    collapsed. A plain iteration-budget exhaustion raises the parent class."""


class DegenerateVoltageError(PowerFlowError):
    """A current magnitude was requested at a non-positive voltage."""


@dataclass
class StateVector:
    """Bus voltage angles and magnitudes; the slack angle is the reference.

    The free (estimable) coordinates are the n-1 non-slack angles followed
    by all n magnitudes, giving dimension 2n-1.
    """

    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.theta.shape != self.v.shape or self.theta.ndim != 1:
            raise ValueError("theta and v must be 1-D arrays of equal length")

    @property
    def n_buses(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def flat(cls, n_buses: int) -> "StateVector":
        """Flat start: all angles zero, all magnitudes one."""
        return cls(np.zeros(n_buses), np.ones(n_buses))

    def copy(self) -> "StateVector":
        return StateVector(self.theta.copy(), self.v.copy())

    def free(self, slack_bus: int) -> np.ndarray:
        """Pack into the free coordinate vector (non-slack angles, then v)."""
        mask = np.arange(self.n_buses) != slack_bus
        return np.concatenate((self.theta[mask], self.v))

    @classmethod
    def from_free(cls, x: np.ndarray, n_buses: int, slack_bus: int) -> "StateVector":
        """Unpack a free coordinate vector; the slack angle is set to zero."""
        x = np.asarray(x, dtype=float)
        if x.shape != (2 * n_buses - 1,):
            raise ValueError(f"expected {2 * n_buses - 1} free coordinates, got {x.shape}")
        theta = np.zeros(n_buses)
        mask = np.arange(n_buses) != slack_bus
        theta[mask] = x[: n_buses - 1]
        return cls(theta, x[n_buses - 1 :].copy())


def line_flow(state: StateVector, branch: Branch, direction: str) -> tuple[float, float]:
    """Active and reactive power entering ``branch`` at the measuring end.

    With i the measuring end, k the far end and d = theta_i - theta_k:

        P = V_i^2 (g + g_s) - V_i V_k (b sin d + g cos d)
        Q = -V_i^2 (b - b_s) - V_i V_k (g sin d - b cos d)

    where (g_s, b_s) is the shunt at the measuring end. The shunt
    susceptance enters Q with a plus sign, so at flat start a line with
    b_s = 0.02 reads Q = 0.02.
    """
    i, k = branch.endpoints(direction)
    g_s, b_s = branch.shunt(direction)
    g, b = branch.g_series, branch.b_series
    vi, vk = state.v[i], state.v[k]
    d = state.theta[i] - state.theta[k]
    p = vi * vi * (g + g_s) - vi * vk * (b * np.sin(d) + g * np.cos(d))
    q = -vi * vi * (b - b_s) - vi * vk * (g * np.sin(d) - b * np.cos(d))
    return float(p), float(q)


def line_current_magnitude(state: StateVector, branch: Branch, direction: str) -> float:
    """Current magnitude at the measuring end: sqrt(P^2 + Q^2) / V_i."""
    i, _ = branch.endpoints(direction)
    vi = state.v[i]
    if vi <= 0.0:
        raise DegenerateVoltageError(f"bus {i} voltage {vi} is not positive")
    p, q = line_flow(state, branch, direction)
    return float(np.hypot(p, q) / vi)


def bus_injection(state: StateVector, y: AdmittanceMatrix, bus: int) -> tuple[float, float]:
    """Net (P, Q) injected at ``bus``, summed over its admittance row."""
    d = state.theta[bus] - state.theta
    gi, bi = y.g[bus], y.b[bus]
    a = gi * np.cos(d) + bi * np.sin(d)
    c = gi * np.sin(d) - bi * np.cos(d)
    p = state.v[bus] * float(a @ state.v)
    q = state.v[bus] * float(c @ state.v)
    return p, q


def _injection_terms(
    theta: np.ndarray, v: np.ndarray, g: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Trig-weighted admittance matrices and all-bus injections.

    Returns (a, c, p, q) with a = G cos + B sin, c = G sin - B cos evaluated
    on the angle-difference matrix, and p = v * (a @ v), q = v * (c @ v).
    """
    d = theta[:, None] - theta[None, :]
    a = g * np.cos(d) + b * np.sin(d)
    c = g * np.sin(d) - b * np.cos(d)
    return a, c, v * (a @ v), v * (c @ v)


def _injection_jacobian_blocks(
    theta: np.ndarray, v: np.ndarray, g: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dense partials of all-bus injections: (dP/dth, dP/dV, dQ/dth, dQ/dV)."""
    a, c, _, _ = _injection_terms(theta, v, g, b)
    av = a @ v
    cv = c @ v
    vv = v[:, None] * v[None, :]

    dp_dth = vv * c
    np.fill_diagonal(dp_dth, -v * cv + v * v * np.diag(c))
    dp_dv = v[:, None] * a
    np.fill_diagonal(dp_dv, av + v * np.diag(a))

    dq_dth = -vv * a
    np.fill_diagonal(dq_dth, v * av - v * v * np.diag(a))
    dq_dv = v[:, None] * c
    np.fill_diagonal(dq_dv, cv + v * np.diag(c))
    return dp_dth, dp_dv, dq_dth, dq_dv


@dataclass(frozen=True)
class _LineTaps:
    """Gathered per-measurement branch data for vectorized line evaluation."""

    rows: np.ndarray  # row index in the measurement vector
    i: np.ndarray  # measuring-end bus
    k: np.ndarray  # far-end bus
    g: np.ndarray
    b: np.ndarray
    g_sh: np.ndarray  # shunt at the measuring end
    b_sh: np.ndarray
    chan: np.ndarray  # 0 = P, 1 = Q, 2 = I


@dataclass(frozen=True)
class _PlanArrays:
    """Index arrays that let h(x) and its Jacobian evaluate without Python loops."""

    m: int
    rows_p: np.ndarray
    buses_p: np.ndarray
    rows_q: np.ndarray
    buses_q: np.ndarray
    rows_v: np.ndarray
    buses_v: np.ndarray
    lines: _LineTaps
    theta_col: np.ndarray  # bus -> free-vector angle column, -1 for slack
    sigmas: np.ndarray


_LINE_CHAN = {
    MeasurementKind.LINE_P_IN: 0,
    MeasurementKind.LINE_P_OUT: 0,
    MeasurementKind.LINE_Q_IN: 1,
    MeasurementKind.LINE_Q_OUT: 1,
    MeasurementKind.LINE_I_IN: 2,
    MeasurementKind.LINE_I_OUT: 2,
}


@lru_cache(maxsize=64)
def _plan_arrays(grid: GridModel) -> _PlanArrays:
    n = grid.n_buses
    rows: dict[MeasurementKind, list[int]] = {kind: [] for kind in MeasurementKind}
    locs: dict[MeasurementKind, list[int]] = {kind: [] for kind in MeasurementKind}
    for row, entry in enumerate(grid.measurement_plan):
        rows[entry.kind].append(row)
        locs[entry.kind].append(entry.location)

    line_rows: list[int] = []
    li: list[int] = []
    lk: list[int] = []
    lg: list[float] = []
    lb: list[float] = []
    lgs: list[float] = []
    lbs: list[float] = []
    lchan: list[int] = []
    for kind, chan in _LINE_CHAN.items():
        for row, loc in zip(rows[kind], locs[kind]):
            br = grid.branches[loc]
            i, k = br.endpoints(kind.direction)
            g_s, b_s = br.shunt(kind.direction)
            line_rows.append(row)
            li.append(i)
            lk.append(k)
            lg.append(br.g_series)
            lb.append(br.b_series)
            lgs.append(g_s)
            lbs.append(b_s)
            lchan.append(chan)

    theta_col = np.full(n, -1, dtype=int)
    free = [bus for bus in range(n) if bus != grid.slack_bus]
    theta_col[free] = np.arange(n - 1)

    def as_idx(values: list[int]) -> np.ndarray:
        return np.asarray(values, dtype=int)

    return _PlanArrays(
        m=len(grid.measurement_plan),
        rows_p=as_idx(rows[MeasurementKind.BUS_P]),
        buses_p=as_idx(locs[MeasurementKind.BUS_P]),
        rows_q=as_idx(rows[MeasurementKind.BUS_Q]),
        buses_q=as_idx(locs[MeasurementKind.BUS_Q]),
        rows_v=as_idx(rows[MeasurementKind.BUS_V]),
        buses_v=as_idx(locs[MeasurementKind.BUS_V]),
        lines=_LineTaps(
            rows=as_idx(line_rows),
            i=as_idx(li),
            k=as_idx(lk),
            g=np.asarray(lg, dtype=float),
            b=np.asarray(lb, dtype=float),
            g_sh=np.asarray(lgs, dtype=float),
            b_sh=np.asarray(lbs, dtype=float),
            chan=as_idx(lchan),
        ),
        theta_col=theta_col,
        sigmas=grid.measurement_plan.sigmas(),
    )


def _line_pq(
    taps: _LineTaps, theta: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-measurement line quantities (vi, vk, sin d, cos d, P, Q)."""
    vi = v[taps.i]
    vk = v[taps.k]
    d = theta[taps.i] - theta[taps.k]
    sd = np.sin(d)
    cd = np.cos(d)
    p = vi * vi * (taps.g + taps.g_sh) - vi * vk * (taps.b * sd + taps.g * cd)
    q = -vi * vi * (taps.b - taps.b_sh) - vi * vk * (taps.g * sd - taps.b * cd)
    return vi, vk, sd, cd, p, q


def measurement_function(state: StateVector, grid: GridModel) -> np.ndarray:
    """Evaluate every planned measurement at ``state``, in plan order."""
    pa = _plan_arrays(grid)
    y = build_admittance(grid)
    h = np.empty(pa.m, dtype=float)

    if pa.rows_p.size or pa.rows_q.size:
        _, _, p_all, q_all = _injection_terms(state.theta, state.v, y.g, y.b)
        h[pa.rows_p] = p_all[pa.buses_p]
        h[pa.rows_q] = q_all[pa.buses_q]
    h[pa.rows_v] = state.v[pa.buses_v]

    taps = pa.lines
    if taps.rows.size:
        vi, _, _, _, p, q = _line_pq(taps, state.theta, state.v)
        if np.any(vi <= 0.0):
            bad = int(taps.i[np.argmax(vi <= 0.0)])
            raise DegenerateVoltageError(f"bus {bad} voltage is not positive")
        vals = np.where(taps.chan == 0, p, np.where(taps.chan == 1, q, np.hypot(p, q) / vi))
        h[taps.rows] = vals
    return h


def measurement_jacobian(state: StateVector, grid: GridModel) -> np.ndarray:
    """Analytic partials of the measurement function, shape m x (2n-1).

    Columns are the free coordinates: angles at non-slack buses in bus
    order, then magnitudes at every bus. Current-magnitude rows whose
    apparent power sits below the kink floor are zeroed.
    """
    pa = _plan_arrays(grid)
    n = grid.n_buses
    jac = np.zeros((pa.m, 2 * n - 1), dtype=float)
    tc = pa.theta_col
    v_col = (n - 1) + np.arange(n)

    if pa.rows_p.size or pa.rows_q.size:
        y = build_admittance(grid)
        dp_dth, dp_dv, dq_dth, dq_dv = _injection_jacobian_blocks(
            state.theta, state.v, y.g, y.b
        )
        free = tc >= 0
        for rows_kind, buses_kind, dth, dv in (
            (pa.rows_p, pa.buses_p, dp_dth, dp_dv),
            (pa.rows_q, pa.buses_q, dq_dth, dq_dv),
        ):
            if rows_kind.size:
                jac[np.ix_(rows_kind, tc[free])] = dth[np.ix_(buses_kind, free)]
                jac[np.ix_(rows_kind, v_col)] = dv[buses_kind]

    jac[pa.rows_v, v_col[pa.buses_v]] = 1.0

    taps = pa.lines
    if taps.rows.size:
        vi, vk, sd, cd, p, q = _line_pq(taps, state.theta, state.v)
        g, b = taps.g, taps.b
        # Partials of P and Q in the measuring direction.
        dp_di = -vi * vk * (b * cd - g * sd)
        dp_dvi = 2.0 * vi * (g + taps.g_sh) - vk * (b * sd + g * cd)
        dp_dvk = -vi * (b * sd + g * cd)
        dq_di = -vi * vk * (g * cd + b * sd)
        dq_dvi = -2.0 * vi * (taps.b - taps.b_sh) - vk * (g * sd - b * cd)
        dq_dvk = -vi * (g * sd - b * cd)

        s = np.hypot(p, q)
        live = s >= CURRENT_KINK_FLOOR
        inv_svi = np.where(live, 1.0 / np.where(live, s * vi, 1.0), 0.0)
        di_di = (p * dp_di + q * dq_di) * inv_svi
        di_dvi = (p * dp_dvi + q * dq_dvi) * inv_svi - np.where(live, s / (vi * vi), 0.0)
        di_dvk = (p * dp_dvk + q * dq_dvk) * inv_svi

        def by_chan(a: np.ndarray, c: np.ndarray, e: np.ndarray) -> np.ndarray:
            return np.where(taps.chan == 0, a, np.where(taps.chan == 1, c, e))

        d_di = by_chan(dp_di, dq_di, di_di)
        d_dvi = by_chan(dp_dvi, dq_dvi, di_dvi)
        d_dvk = by_chan(dp_dvk, dq_dvk, di_dvk)

        has_i = tc[taps.i] >= 0
        has_k = tc[taps.k] >= 0
        # i and k angle columns receive opposite contributions.
        np.add.at(jac, (taps.rows[has_i], tc[taps.i[has_i]]), d_di[has_i])
        np.add.at(jac, (taps.rows[has_k], tc[taps.k[has_k]]), -d_di[has_k])
        np.add.at(jac, (taps.rows, v_col[taps.i]), d_dvi)
        np.add.at(jac, (taps.rows, v_col[taps.k]), d_dvk)
    return jac


def solve_power_flow(
    grid: GridModel,
    injections: Mapping[int, tuple[float, float]],
    tol: float = PF_TOLERANCE,
    max_iter: int = PF_MAX_ITER,
) -> StateVector:
    """Newton-Raphson solution of the power-balance equations.

    ``injections`` maps every non-slack bus to its net (P, Q) setpoint in
    per-unit. The slack bus holds the angle reference and a fixed 1.0 p.u.
    voltage; its entry, if present, is ignored. Raises NonConvergenceError
    when the iteration budget runs out and DivergenceError when the
    mismatch grows three iterations in a row.
    """
    n = grid.n_buses
    slack = grid.slack_bus
    non_slack = [bus for bus in range(n) if bus != slack]
    missing = [bus for bus in non_slack if bus not in injections]
    if missing:
        raise ValueError(f"injection setpoints missing for buses {missing}")

    p_set = np.array([injections[bus][0] for bus in non_slack])
    q_set = np.array([injections[bus][1] for bus in non_slack])
    y = build_admittance(grid)
    ns = np.asarray(non_slack, dtype=int)

    theta = np.zeros(n)
    v = np.ones(n)
    prev_norm = np.inf
    growth_streak = 0
    for it in range(max_iter + 1):
        _, _, p_all, q_all = _injection_terms(theta, v, y.g, y.b)
        mismatch = np.concatenate((p_set - p_all[ns], q_set - q_all[ns]))
        norm = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        if norm <= tol:
            return StateVector(theta, v)
        if it == max_iter:
            break
        if norm > prev_norm:
            growth_streak += 1
            if growth_streak >= 3:
                raise DivergenceError(
                    f"mismatch grew 3 consecutive iterations (now {norm:.3e})"
                )
        else:
            growth_streak = 0
        prev_norm = norm

        dp_dth, dp_dv, dq_dth, dq_dv = _injection_jacobian_blocks(theta, v, y.g, y.b)
        top = np.hstack((dp_dth[np.ix_(ns, ns)], dp_dv[np.ix_(ns, ns)]))
        bot = np.hstack((dq_dth[np.ix_(ns, ns)], dq_dv[np.ix_(ns, ns)]))
        jac = np.vstack((top, bot))
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError(f"singular power-flow Jacobian: {exc}") from exc
        theta[ns] += step[: len(ns)]
        v[ns] += step[len(ns) :]
        if np.any(v <= 0.0):
            raise DivergenceError("voltage collapsed to a non-positive value")

    raise NonConvergenceError(
        f"power flow not converged after {max_iter} iterations (mismatch {prev_norm:.3e})"
    )
