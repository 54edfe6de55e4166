"""Stealthy false-data injection: crafting, strength calibration, verification.

An attack shifts one state variable of the current estimate (the target
bus's voltage magnitude or angle) and replays the measurement deltas that
shift implies. Because the injected vector is consistent with a shifted
state, re-estimation reproduces the clean residual and the chi-square
detector sees nothing new. Attack strength is graded by the relative
change of the target's estimated active injection: type A lies in
(50%, 100%], type B in (25%, 50%], type C in (5%, 25%].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .estimation import BddVerdict, chi_square_statistic, chi_square_threshold, residual, wls_estimate
from .grid import GridModel, MeasurementKind, build_admittance
from .powerflow import StateVector, bus_injection, measurement_function

ATTACK_VARIABLES = ("Vm", "Va")
ATTACK_TYPES = ("A", "B", "C")
TYPE_RATE_RANGES: dict[str, tuple[float, float]] = {
    "A": (0.50, 1.00),
    "B": (0.25, 0.50),
    "C": (0.05, 0.25),
}
C2_MAX = {"Vm": 0.2, "Va": 0.5}
CALIBRATION_MAX_ITER = 60
INJECTION_FLOOR = 1e-6


class AttackError(Exception):
    """Base class for attack-construction failures."""


class NearZeroInjectionError(AttackError):
    """The target's estimated active injection is too small to define a rate."""


class CalibrationInfeasibleError(AttackError):
    """No perturbation within the bracket reaches the requested rate range."""


@dataclass(frozen=True)
class AttackSpec:
    """What to attack: one bus, one state variable, one strength grade."""

    target_bus: int
    variable: str
    attack_type: str
    sign: int = 1

    def __post_init__(self) -> None:
        if self.variable not in ATTACK_VARIABLES:
            raise ValueError(f"variable must be one of {ATTACK_VARIABLES}, got {self.variable!r}")
        if self.attack_type not in ATTACK_TYPES:
            raise ValueError(f"attack_type must be one of {ATTACK_TYPES}, got {self.attack_type!r}")
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign!r}")


@dataclass(frozen=True)
class AttackRecord:
    """A crafted injection vector together with how it was built."""

    spec: AttackSpec
    c2: float
    a: np.ndarray
    affected: frozenset[int]
    achieved_rate: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))


class StealthCheck(NamedTuple):
    clean_verdict: BddVerdict
    attacked_verdict: BddVerdict
    residual_gap: float


def affected_measurements(grid: GridModel, target_bus: int) -> frozenset[int]:
    """Plan indices whose measurement depends on the target bus's state.

    That is the target's own P, Q and V, the P and Q injections of every
    in-service neighbor, and all six flow and current channels of every
    in-service incident branch.
    """
    if not 0 <= target_bus < grid.n_buses:
        raise ValueError(f"bus {target_bus} does not exist")
    sensitive_buses = {target_bus} | set(grid.neighbors(target_bus))
    incident = set(grid.incident_branches(target_bus))
    out: set[int] = set()
    for idx, entry in enumerate(grid.measurement_plan):
        if entry.kind is MeasurementKind.BUS_V:
            if entry.location == target_bus:
                out.add(idx)
        elif entry.kind.is_bus_kind:
            if entry.location in sensitive_buses:
                out.add(idx)
        elif entry.location in incident:
            out.add(idx)
    return frozenset(out)


def _shifted(x_hat: StateVector, spec: AttackSpec, c2: float) -> StateVector:
    shifted = x_hat.copy()
    if spec.variable == "Vm":
        shifted.v[spec.target_bus] += c2
    else:
        shifted.theta[spec.target_bus] += c2
    return shifted


def craft_attack(grid: GridModel, x_hat: StateVector, spec: AttackSpec, c2: float) -> AttackRecord:
    """Build the injection vector for an explicit perturbation size.

    ``x_hat`` must be the estimate of the frame being attacked; the
    measurement deltas are exact only there. Entries outside the affected
    set are exactly zero.
    """
    if spec.variable == "Va" and spec.target_bus == grid.slack_bus:
        raise ValueError("the slack angle is the reference and cannot be perturbed")
    bus = grid.buses[spec.target_bus]
    if not bus.has_injection:
        raise ValueError(f"bus {spec.target_bus} has no injection and cannot be a target")

    affected = affected_measurements(grid, spec.target_bus)
    a = measurement_function(_shifted(x_hat, spec, c2), grid) - measurement_function(x_hat, grid)
    mask = np.zeros(a.shape[0], dtype=bool)
    mask[list(affected)] = True
    a[~mask] = 0.0
    return AttackRecord(
        spec=spec,
        c2=float(c2),
        a=a,
        affected=affected,
        achieved_rate=_injection_rate(grid, x_hat, spec, c2, strict=False),
    )


def _injection_rate(
    grid: GridModel, x_hat: StateVector, spec: AttackSpec, c2: float, strict: bool
) -> float:
    """Relative change of the target's estimated active injection."""
    y = build_admittance(grid)
    p_base, _ = bus_injection(x_hat, y, spec.target_bus)
    if abs(p_base) <= INJECTION_FLOOR:
        if strict:
            raise NearZeroInjectionError(
                f"bus {spec.target_bus} estimated injection {p_base:.2e} is below {INJECTION_FLOOR}"
            )
        return float("nan")
    p_shift, _ = bus_injection(_shifted(x_hat, spec, c2), y, spec.target_bus)
    return abs(p_shift - p_base) / abs(p_base)


def calibrate_attack(grid: GridModel, x_hat: StateVector, spec: AttackSpec) -> AttackRecord:
    """Bisect the perturbation size until the injection-change rate lands
    inside the requested type range, then craft the record.

    Raises NearZeroInjectionError when the rate is undefined at ``x_hat``
    and CalibrationInfeasibleError when no size within the bracket reaches
    the range (including a non-monotone rate trace for Vm attacks, which
    signals a bad bracket rather than a usable size).
    """
    lo_rate, hi_rate = TYPE_RATE_RANGES[spec.attack_type]
    c_max = C2_MAX[spec.variable]
    _injection_rate(grid, x_hat, spec, 0.0, strict=True)

    trace: list[tuple[float, float]] = []

    def rate_at(size: float) -> float:
        r = _injection_rate(grid, x_hat, spec, spec.sign * size, strict=True)
        if spec.variable == "Vm":
            for prev_size, prev_rate in trace:
                increasing = (size - prev_size) * (r - prev_rate)
                if increasing < 0.0 and abs(r - prev_rate) > 1e-12:
                    raise CalibrationInfeasibleError(
                        f"injection rate is not monotone over the bracket near c2={size:.4g}"
                    )
        trace.append((size, r))
        return r

    rate_hi = rate_at(c_max)
    if rate_hi <= lo_rate:
        raise CalibrationInfeasibleError(
            f"type {spec.attack_type} needs rate > {lo_rate}; c2={c_max} reaches {rate_hi:.4f}"
        )
    if rate_hi <= hi_rate:
        return craft_attack(grid, x_hat, spec, spec.sign * c_max)

    lo_c, hi_c = 0.0, c_max
    for _ in range(CALIBRATION_MAX_ITER):
        mid = 0.5 * (lo_c + hi_c)
        r = rate_at(mid)
        if lo_rate < r <= hi_rate:
            return craft_attack(grid, x_hat, spec, spec.sign * mid)
        if r > hi_rate:
            hi_c = mid
        else:
            lo_c = mid
    raise CalibrationInfeasibleError(
        f"bisection found no c2 with rate in ({lo_rate}, {hi_rate}] after {CALIBRATION_MAX_ITER} steps"
    )


def verify_stealth(
    z: np.ndarray, record: AttackRecord, grid: GridModel, alpha: float = 0.05
) -> StealthCheck:
    """Run the detector on the clean and attacked vectors and compare residuals.

    residual_gap is | ||r_bad|| - ||r|| | / max(||r||, 1e-12) with each
    residual taken at its own re-estimated state.
    """
    z = np.asarray(z, dtype=float)
    clean_verdict, r_clean = _bdd_with_residual(z, grid, alpha)
    attacked_verdict, r_bad = _bdd_with_residual(z + record.a, grid, alpha)
    norm_clean = float(np.linalg.norm(r_clean))
    norm_bad = float(np.linalg.norm(r_bad))
    gap = abs(norm_bad - norm_clean) / max(norm_clean, 1e-12)
    return StealthCheck(clean_verdict=clean_verdict, attacked_verdict=attacked_verdict, residual_gap=gap)


def _bdd_with_residual(z: np.ndarray, grid: GridModel, alpha: float) -> tuple[BddVerdict, np.ndarray]:
    result = wls_estimate(z, grid)
    r = residual(z, result.x_hat, grid)
    statistic = chi_square_statistic(r, grid.measurement_plan)
    dof = len(grid.measurement_plan) - grid.n_states
    threshold = chi_square_threshold(dof, alpha)
    verdict = BddVerdict(
        statistic=statistic, dof=dof, alpha=alpha, threshold=threshold, flagged=bool(statistic >= threshold)
    )
    return verdict, r
