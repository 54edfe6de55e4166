"""Power-grid data model in per-unit: buses, branches, measurement plan, Y-bus.

The grid file format is a single JSON document, see ``load_grid``. Everything
is per-unit on ``base_mva`` already at file level; no unit conversion happens
on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class GridError(Exception):
    """Base class for grid-model failures."""


class GridFormatError(GridError):
    """A grid file could not be parsed into the model at all."""


class GridValidationError(GridError):
    """A parsed grid violates one or more model invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MeasurementKind(str, Enum):
    """The nine metered quantities: bus P/Q/V and line P/Q/I at both ends."""

    BUS_P = "BusP"
    BUS_Q = "BusQ"
    BUS_V = "BusV"
    LINE_P_IN = "LinePIn"
    LINE_P_OUT = "LinePOut"
    LINE_Q_IN = "LineQIn"
    LINE_Q_OUT = "LineQOut"
    LINE_I_IN = "LineIIn"
    LINE_I_OUT = "LineIOut"

    @property
    def is_bus_kind(self) -> bool:
        return self in (MeasurementKind.BUS_P, MeasurementKind.BUS_Q, MeasurementKind.BUS_V)

    @property
    def is_line_kind(self) -> bool:
        return not self.is_bus_kind

    @property
    def direction(self) -> str:
        """``in`` or ``out`` for line kinds; raises for bus kinds."""
        if self.is_bus_kind:
            raise ValueError(f"{self.value} has no direction")
        return "out" if self.value.endswith("Out") else "in"


# Canonical channel orders of the frame blocks (c_b = 3, c_l = 6).
BUS_CHANNELS: tuple[MeasurementKind, ...] = (
    MeasurementKind.BUS_P,
    MeasurementKind.BUS_Q,
    MeasurementKind.BUS_V,
)
LINE_CHANNELS: tuple[MeasurementKind, ...] = (
    MeasurementKind.LINE_P_IN,
    MeasurementKind.LINE_P_OUT,
    MeasurementKind.LINE_Q_IN,
    MeasurementKind.LINE_Q_OUT,
    MeasurementKind.LINE_I_IN,
    MeasurementKind.LINE_I_OUT,
)

# Rejection floor for measurement sigmas: anything smaller would blow up the
# weight matrix diag(1/sigma^2) in the estimator.
SIGMA_FLOOR = 1e-9


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    p_gen: float = 0.0
    q_gen: float = 0.0

    @property
    def has_injection(self) -> bool:
        """True when the bus has any load or generation attached."""
        return any(v != 0.0 for v in (self.p_load, self.q_load, self.p_gen, self.q_gen))


@dataclass(frozen=True)
class Branch:
    """A pi-model branch. Transformers appear as equivalent branches."""

    from_bus: int
    to_bus: int
    g_series: float
    b_series: float
    g_shunt_from: float = 0.0
    b_shunt_from: float = 0.0
    g_shunt_to: float = 0.0
    b_shunt_to: float = 0.0
    in_service: bool = True

    def shunt(self, direction: str) -> tuple[float, float]:
        """(g, b) of the shunt at the measuring end for a flow direction."""
        if direction == "in":
            return self.g_shunt_from, self.b_shunt_from
        if direction == "out":
            return self.g_shunt_to, self.b_shunt_to
        raise ValueError(f"unknown direction {direction!r}")

    def endpoints(self, direction: str) -> tuple[int, int]:
        """(i, k) bus indices with i the measuring end for a flow direction."""
        if direction == "in":
            return self.from_bus, self.to_bus
        if direction == "out":
            return self.to_bus, self.from_bus
        raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class MeasurementDescriptor:
    kind: MeasurementKind
    location: int
    sigma: float


@dataclass(frozen=True)
class MeasurementPlan:
    """Ordered measurement descriptors; order is the canonical order of z."""

    entries: tuple[MeasurementDescriptor, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def sigmas(self) -> np.ndarray:
        return np.array([e.sigma for e in self.entries], dtype=np.float64)

    def monitored_buses(self) -> list[int]:
        """Sorted bus ids that carry at least one bus measurement."""
        return sorted({e.location for e in self.entries if e.kind.is_bus_kind})

    def monitored_lines(self) -> list[int]:
        """Sorted branch indices that carry at least one line measurement."""
        return sorted({e.location for e in self.entries if e.kind.is_line_kind})

    def index_of(self, kind: MeasurementKind, location: int) -> int | None:
        for i, e in enumerate(self.entries):
            if e.kind is kind and e.location == location:
                return i
        return None


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    base_mva: float
    measurement_plan: MeasurementPlan

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_states(self) -> int:
        """Dimension of the free state vector: all angles but slack, all magnitudes."""
        return 2 * self.n_buses - 1

    def neighbors(self, bus: int) -> list[int]:
        """Buses sharing an in-service branch with ``bus``."""
        out = set()
        for br in self.branches:
            if not br.in_service:
                continue
            if br.from_bus == bus:
                out.add(br.to_bus)
            elif br.to_bus == bus:
                out.add(br.from_bus)
        return sorted(out)

    def incident_branches(self, bus: int) -> list[int]:
        """Indices of in-service branches touching ``bus``."""
        return [
            i
            for i, br in enumerate(self.branches)
            if br.in_service and bus in (br.from_bus, br.to_bus)
        ]

    def injection_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.has_injection]


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Real and imaginary parts of the bus admittance matrix Y = G + jB."""

    g: np.ndarray
    b: np.ndarray


def build_admittance(grid: GridModel) -> AdmittanceMatrix:
    """Assemble the Y-bus: off-diagonal -(g+jb), diagonals sum series plus own-end shunts."""
    n = grid.n_buses
    g = np.zeros((n, n), dtype=np.float64)
    b = np.zeros((n, n), dtype=np.float64)
    for br in grid.branches:
        if not br.in_service:
            continue
        i, k = br.from_bus, br.to_bus
        g[i, k] -= br.g_series
        g[k, i] -= br.g_series
        b[i, k] -= br.b_series
        b[k, i] -= br.b_series
        g[i, i] += br.g_series + br.g_shunt_from
        b[i, i] += br.b_series + br.b_shunt_from
        g[k, k] += br.g_series + br.g_shunt_to
        b[k, k] += br.b_series + br.b_shunt_to
    return AdmittanceMatrix(g=g, b=b)


def validate_grid(grid: GridModel) -> list[str]:
    """Return a list of invariant violations; empty iff the grid is valid."""
    violations: list[str] = []
    n = grid.n_buses

    if n == 0:
        return ["grid has no buses"]
    if grid.base_mva <= 0:
        violations.append(f"base_mva must be positive, got {grid.base_mva}")

    ids = [bus.id for bus in grid.buses]
    if ids != list(range(n)):
        violations.append("bus ids must be unique and consecutive starting at 0")
        return violations  # index-based checks below would be meaningless

    if not 0 <= grid.slack_bus < n:
        violations.append(f"slack bus {grid.slack_bus} is not a valid bus id")

    any_in_service = False
    for idx, br in enumerate(grid.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            violations.append(f"branch {idx} references a nonexistent bus")
            continue
        if br.from_bus == br.to_bus:
            violations.append(f"branch {idx} connects bus {br.from_bus} to itself")
        if br.g_series == 0.0 and br.b_series == 0.0:
            violations.append(f"branch {idx} has zero series admittance")
        any_in_service = any_in_service or br.in_service

    if n > 1 and not any_in_service:
        violations.append("no branches in service")
    elif not _connected(grid):
        violations.append("in-service branch graph is not connected")

    seen: set[tuple[MeasurementKind, int]] = set()
    for idx, e in enumerate(grid.measurement_plan):
        if e.sigma <= SIGMA_FLOOR:
            violations.append(f"measurement {idx} has sigma {e.sigma} <= {SIGMA_FLOOR}")
        if e.kind.is_bus_kind:
            if not 0 <= e.location < n:
                violations.append(f"measurement {idx} references nonexistent bus {e.location}")
        elif not 0 <= e.location < len(grid.branches):
            violations.append(f"measurement {idx} references nonexistent branch {e.location}")
        elif not grid.branches[e.location].in_service:
            violations.append(f"measurement {idx} meters out-of-service branch {e.location}")
        key = (e.kind, e.location)
        if key in seen:
            violations.append(
                f"duplicate measurement {e.kind.value} at {e.location}"
                " (frame blocks hold one value per kind and location)"
            )
        seen.add(key)

    m = len(grid.measurement_plan)
    if m < grid.n_states:
        violations.append(
            f"plan has {m} measurements; observability requires at least {grid.n_states}"
        )
    return violations


def _connected(grid: GridModel) -> bool:
    n = grid.n_buses
    if n <= 1:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in grid.branches:
        if br.in_service and 0 <= br.from_bus < n and 0 <= br.to_bus < n:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {0}
    stack = [0]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == n


def load_grid(path: str | Path) -> GridModel:
    """Parse a JSON grid file and validate it.

    Top-level keys: ``base_mva``, ``slack_bus``, ``buses`` (array of
    {id, p_load, q_load, p_gen, q_gen}), ``branches`` (array of
    {from, to, g, b, g_sf, b_sf, g_st, b_st, in_service}), ``measurements``
    (array of {kind, location, sigma}). All values per-unit except base_mva.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"cannot parse grid file {path}: {exc}") from exc
    grid = grid_from_dict(doc)
    violations = validate_grid(grid)
    if violations:
        raise GridValidationError(violations)
    return grid


def grid_from_dict(doc: dict) -> GridModel:
    """Build a GridModel from a parsed JSON document (no validation)."""
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                p_gen=float(b.get("p_gen", 0.0)),
                q_gen=float(b.get("q_gen", 0.0)),
            )
            for b in doc["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                g_series=float(br["g"]),
                b_series=float(br["b"]),
                g_shunt_from=float(br.get("g_sf", 0.0)),
                b_shunt_from=float(br.get("b_sf", 0.0)),
                g_shunt_to=float(br.get("g_st", 0.0)),
                b_shunt_to=float(br.get("b_st", 0.0)),
                in_service=bool(br.get("in_service", True)),
            )
            for br in doc["branches"]
        )
        plan = MeasurementPlan(
            entries=tuple(
                MeasurementDescriptor(
                    kind=MeasurementKind(m["kind"]),
                    location=int(m["location"]),
                    sigma=float(m["sigma"]),
                )
                for m in doc["measurements"]
            )
        )
        slack = doc["slack_bus"]
        base_mva = float(doc["base_mva"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"malformed grid document: {exc}") from exc

    # The schema writes one slack bus; a list form is accepted so that files
    # claiming several slacks fail validation instead of failing to parse.
    if isinstance(slack, list):
        if len(slack) != 1:
            raise GridValidationError(
                [f"exactly one slack bus required, file names {len(slack)}"]
            )
        slack = slack[0]

    return GridModel(
        buses=buses,
        branches=branches,
        slack_bus=int(slack),
        base_mva=base_mva,
        measurement_plan=plan,
    )


def grid_to_dict(grid: GridModel) -> dict:
    return {
        "base_mva": grid.base_mva,
        "slack_bus": grid.slack_bus,
        "buses": [
            {
                "id": b.id,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "p_gen": b.p_gen,
                "q_gen": b.q_gen,
            }
            for b in grid.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "g": br.g_series,
                "b": br.b_series,
                "g_sf": br.g_shunt_from,
                "b_sf": br.b_shunt_from,
                "g_st": br.g_shunt_to,
                "b_st": br.b_shunt_to,
                "in_service": br.in_service,
            }
            for br in grid.branches
        ],
        "measurements": [
            {"kind": e.kind.value, "location": e.location, "sigma": e.sigma}
            for e in grid.measurement_plan
        ],
    }


def save_grid(grid: GridModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(grid), indent=2) + "\n")


def fixture_path(name: str) -> Path:
    """Path of a grid/profile fixture shipped inside the package."""
    return Path(__file__).parent / "fixtures" / name
