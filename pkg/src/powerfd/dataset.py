"""Labeled measurement time series for detector training and evaluation.

This layer turns a grid into data: per-bus scaling profiles drive a power-flow
simulation that emits one noisy measurement frame per step, a calibrated
stealthy attack generator produces labeled positives against those frames,
sliding windows stack frames for the sequence detector, and a binary container
persists the whole dataset bit-exactly.

Determinism is a hard requirement end to end. Every randomized stage draws
from per-frame child streams spawned off a single master seed, so generating
frames in parallel or in any order yields byte-identical results to a serial
run, and the same seed always reproduces the same file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .attack import (
    ATTACK_TYPES,
    ATTACK_VARIABLES,
    AttackError,
    AttackRecord,
    AttackSpec,
    calibrate_attack,
    verify_stealth,
)
from .estimation import EstimationError, wls_estimate
from .grid import (
    BUS_CHANNELS,
    LINE_CHANNELS,
    GridModel,
    MeasurementKind,
    MeasurementPlan,
    grid_to_dict,
)
from .powerflow import NonConvergenceError, StateVector, measurement_function, solve_power_flow

STEPS_PER_DAY = 96
WINDOW_HISTORY = 7
# Reference train:test proportions, scaled to whatever span a profile covers.
TRAIN_DAYS_REFERENCE = 312
TOTAL_DAYS_REFERENCE = 366
# An attack only enters the dataset once its residual gap clears this bar.
STEALTH_GAP_LIMIT = 1e-6
ATTACK_RETRY_LIMIT = 8
PROFILE_COLUMNS = ("p_load", "q_load", "p_gen", "q_gen")

DATASET_MAGIC = b"PWFDDATA"
DATASET_VERSION = 1

_VARIABLE_CODES = {name: i for i, name in enumerate(ATTACK_VARIABLES)}
_TYPE_CODES = {name: i for i, name in enumerate(ATTACK_TYPES)}
_ATTACK_COMBOS = tuple(product(ATTACK_TYPES, ATTACK_VARIABLES))
_UNIT_FACTORS = np.ones(4, dtype=np.float64)


class DatasetError(Exception):
    """Base class for dataset-layer failures."""


class ProfileFormatError(DatasetError):
    """A profile file could not be parsed into a valid series."""


class ProfileGapError(DatasetError):
    """A profiled bus does not cover every step exactly once."""


class SimulationError(DatasetError):
    """The simulated power flow failed at some step."""


class InsufficientDaysError(DatasetError):
    """The requested train/test day budget exceeds the available span."""


class DatasetFormatError(DatasetError):
    """A dataset file is corrupt, truncated, or not a dataset at all."""


class DatasetVersionError(DatasetFormatError):
    """A dataset file uses a format version this code does not know."""


@dataclass(frozen=True, eq=False)
class ProfileSeries:
    """Per-bus multiplicative scaling factors, one row of four per step.

    ``factors`` maps a bus id to an ``(n_steps, 4)`` array whose columns scale
    the bus's load and generation setpoints in ``PROFILE_COLUMNS`` order.
    Buses absent from the mapping implicitly keep factor one throughout.
    """

    steps_per_day: int
    n_steps: int
    factors: Mapping[int, np.ndarray]

    def __post_init__(self) -> None:
        if self.steps_per_day < 1:
            raise ValueError(f"steps_per_day must be positive, got {self.steps_per_day}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if self.n_steps % self.steps_per_day != 0:
            raise ValueError(
                f"{self.n_steps} steps is not a whole number of {self.steps_per_day}-step days"
            )
        coerced = {}
        for bus, arr in self.factors.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (self.n_steps, 4):
                raise ValueError(
                    f"bus {bus} factors have shape {arr.shape}, expected {(self.n_steps, 4)}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"bus {bus} factors contain non-finite values")
            coerced[bus] = arr
        object.__setattr__(self, "factors", coerced)

    @property
    def days(self) -> int:
        return self.n_steps // self.steps_per_day

    @classmethod
    def flat(cls, days: int, steps_per_day: int = STEPS_PER_DAY) -> "ProfileSeries":
        """A profile where every bus keeps its nominal setpoints at every step."""
        return cls(steps_per_day=steps_per_day, n_steps=days * steps_per_day, factors={})

    def factors_for(self, bus: int, step: int) -> np.ndarray:
        """The four scaling factors of ``bus`` at ``step``; ones if unprofiled."""
        arr = self.factors.get(bus)
        if arr is None:
            return _UNIT_FACTORS
        return arr[step]


def load_profiles(path: str | Path, steps_per_day: int = STEPS_PER_DAY) -> ProfileSeries:
    """Read a profile CSV with columns step, bus, p_load, q_load, p_gen, q_gen.

    Every bus that appears must cover steps 0..S-1 exactly once; buses that do
    not appear at all default to factor one. Raises ProfileFormatError for
    malformed content and ProfileGapError when a bus skips or repeats a step.
    """
    path = Path(path)
    required = ("step", "bus") + PROFILE_COLUMNS
    rows: dict[int, dict[int, tuple[float, ...]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ProfileFormatError(f"{path.name}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                step = int(row["step"])
                bus = int(row["bus"])
                values = tuple(float(row[c]) for c in PROFILE_COLUMNS)
            except (TypeError, ValueError) as exc:
                raise ProfileFormatError(f"{path.name} line {lineno}: {exc}") from exc
            if step < 0:
                raise ProfileFormatError(f"{path.name} line {lineno}: negative step {step}")
            if not all(math.isfinite(v) for v in values):
                raise ProfileFormatError(
                    f"{path.name} line {lineno}: non-finite factor for bus {bus}"
                )
            per_bus = rows.setdefault(bus, {})
            if step in per_bus:
                raise ProfileGapError(f"{path.name}: bus {bus} repeats step {step}")
            per_bus[step] = values
    if not rows:
        raise ProfileFormatError(f"{path.name}: no profile rows")
    n_steps = 1 + max(max(steps) for steps in rows.values())
    for bus, steps in sorted(rows.items()):
        for k in range(n_steps):
            if k not in steps:
                raise ProfileGapError(
                    f"{path.name}: bus {bus} is missing step {k} of 0..{n_steps - 1}"
                )
    if n_steps % steps_per_day != 0:
        raise ProfileFormatError(
            f"{path.name}: {n_steps} steps is not a whole number of {steps_per_day}-step days"
        )
    factors = {
        bus: np.array([steps[k] for k in range(n_steps)], dtype=np.float64)
        for bus, steps in rows.items()
    }
    return ProfileSeries(steps_per_day=steps_per_day, n_steps=n_steps, factors=factors)


def synth_profiles(
    grid: GridModel,
    days: int,
    seed: int,
    steps_per_day: int = STEPS_PER_DAY,
    jitter: float = 0.1,
) -> ProfileSeries:
    """Synthesize a double-peak daily profile with seeded per-step jitter.

    The deterministic base shape has a morning and a stronger evening peak and
    repeats every day; each bus and factor column gets independent uniform
    jitter of relative amplitude ``jitter`` on top. With jitter zero all days
    are identical; the same seed always reproduces the same series.
    """
    if days < 1:
        raise ValueError(f"days must be positive, got {days}")
    if not 0.0 <= jitter < 1.0:
        raise ValueError(f"jitter must be in [0, 1), got {jitter}")
    n_steps = days * steps_per_day
    hour = (np.arange(n_steps) % steps_per_day) * (24.0 / steps_per_day)
    base = (
        0.75
        + 0.25 * np.exp(-(((hour - 8.0) / 2.5) ** 2))
        + 0.35 * np.exp(-(((hour - 18.5) / 2.5) ** 2))
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    factors = {}
    for bus in grid.buses:
        wobble = 1.0 + rng.uniform(-jitter, jitter, size=(n_steps, 4))
        factors[bus.id] = base[:, None] * wobble
    return ProfileSeries(steps_per_day=steps_per_day, n_steps=n_steps, factors=factors)


@dataclass(frozen=True)
class NoiseConfig:
    """Per-channel measurement noise sigmas in per unit."""

    sigma_v: float = 0.003
    sigma_p: float = 0.006
    sigma_q: float = 0.006
    sigma_i: float = 0.006

    def __post_init__(self) -> None:
        for name in ("sigma_v", "sigma_p", "sigma_q", "sigma_i"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    @classmethod
    def silent(cls) -> "NoiseConfig":
        """A configuration that adds no noise at all."""
        return cls(sigma_v=0.0, sigma_p=0.0, sigma_q=0.0, sigma_i=0.0)

    def sigma_for(self, kind: MeasurementKind) -> float:
        if kind is MeasurementKind.BUS_V:
            return self.sigma_v
        if kind in (MeasurementKind.BUS_P, MeasurementKind.LINE_P_IN, MeasurementKind.LINE_P_OUT):
            return self.sigma_p
        if kind in (MeasurementKind.BUS_Q, MeasurementKind.LINE_Q_IN, MeasurementKind.LINE_Q_OUT):
            return self.sigma_q
        return self.sigma_i

    def sigmas(self, plan: MeasurementPlan) -> np.ndarray:
        """The noise sigma of every plan entry, in plan order."""
        return np.array([self.sigma_for(e.kind) for e in plan], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseConfig":
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class BlockLayout:
    """Mapping between a measurement plan and the two padded frame blocks.

    The bus block has one row per monitored bus and one column per channel in
    ``BUS_CHANNELS``; the line block likewise over ``LINE_CHANNELS``. Cells
    without a plan entry stay zero and are marked absent in the masks.
    """

    buses: tuple[int, ...]
    lines: tuple[int, ...]
    bus_cells: tuple[np.ndarray, np.ndarray, np.ndarray]
    line_cells: tuple[np.ndarray, np.ndarray, np.ndarray]
    bus_mask: np.ndarray
    line_mask: np.ndarray

    @classmethod
    def from_plan(cls, plan: MeasurementPlan) -> "BlockLayout":
        buses = tuple(plan.monitored_buses())
        lines = tuple(plan.monitored_lines())
        bus_row = {b: i for i, b in enumerate(buses)}
        line_row = {l: i for i, l in enumerate(lines)}
        bus_col = {kind: j for j, kind in enumerate(BUS_CHANNELS)}
        line_col = {kind: j for j, kind in enumerate(LINE_CHANNELS)}
        seen: set[tuple] = set()
        bus_idx: list[tuple[int, int, int]] = []
        line_idx: list[tuple[int, int, int]] = []
        for idx, entry in enumerate(plan):
            key = (entry.kind, entry.location)
            if key in seen:
                raise ValueError(f"duplicate plan entry {entry.kind.value} at {entry.location}")
            seen.add(key)
            if entry.kind.is_bus_kind:
                bus_idx.append((idx, bus_row[entry.location], bus_col[entry.kind]))
            else:
                line_idx.append((idx, line_row[entry.location], line_col[entry.kind]))
        bus_cells = tuple(np.array(col, dtype=np.intp) for col in zip(*bus_idx)) if bus_idx else (
            np.empty(0, dtype=np.intp),
        ) * 3
        line_cells = tuple(np.array(col, dtype=np.intp) for col in zip(*line_idx)) if line_idx else (
            np.empty(0, dtype=np.intp),
        ) * 3
        bus_mask = np.zeros((len(buses), len(BUS_CHANNELS)), dtype=bool)
        bus_mask[bus_cells[1], bus_cells[2]] = True
        line_mask = np.zeros((len(lines), len(LINE_CHANNELS)), dtype=bool)
        line_mask[line_cells[1], line_cells[2]] = True
        return cls(
            buses=buses,
            lines=lines,
            bus_cells=bus_cells,
            line_cells=line_cells,
            bus_mask=bus_mask,
            line_mask=line_mask,
        )

    @property
    def m_bus(self) -> int:
        return len(self.buses)

    @property
    def m_line(self) -> int:
        return len(self.lines)

    def blocks(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scatter a measurement vector into float32 bus and line blocks."""
        z = np.asarray(z, dtype=np.float64)
        bus_block = np.zeros((self.m_bus, len(BUS_CHANNELS)), dtype=np.float32)
        zi, rows, cols = self.bus_cells
        bus_block[rows, cols] = z[zi].astype(np.float32)
        line_block = np.zeros((self.m_line, len(LINE_CHANNELS)), dtype=np.float32)
        zi, rows, cols = self.line_cells
        line_block[rows, cols] = z[zi].astype(np.float32)
        return bus_block, line_block

    def vector(self, bus_block: np.ndarray, line_block: np.ndarray) -> np.ndarray:
        """Gather the plan-ordered measurement vector back out of two blocks."""
        n = len(self.bus_cells[0]) + len(self.line_cells[0])
        z = np.zeros(n, dtype=np.float64)
        zi, rows, cols = self.bus_cells
        z[zi] = np.asarray(bus_block, dtype=np.float64)[rows, cols]
        zi, rows, cols = self.line_cells
        z[zi] = np.asarray(line_block, dtype=np.float64)[rows, cols]
        return z


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    """One time step of padded measurement blocks with a ground-truth label.

    Blocks are float32 with masked-out cells exactly zero. Label 1 means a
    verified attack record is attached; clean frames carry label 0 and none.
    """

    t: int
    bus_block: np.ndarray
    line_block: np.ndarray
    bus_mask: np.ndarray
    line_mask: np.ndarray
    label: int
    attack: AttackRecord | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "bus_block", np.asarray(self.bus_block, dtype=np.float32))
        object.__setattr__(self, "line_block", np.asarray(self.line_block, dtype=np.float32))
        object.__setattr__(self, "bus_mask", np.asarray(self.bus_mask, dtype=bool))
        object.__setattr__(self, "line_mask", np.asarray(self.line_mask, dtype=bool))
        if self.bus_block.shape != self.bus_mask.shape:
            raise ValueError(
                f"bus block {self.bus_block.shape} and mask {self.bus_mask.shape} differ"
            )
        if self.line_block.shape != self.line_mask.shape:
            raise ValueError(
                f"line block {self.line_block.shape} and mask {self.line_mask.shape} differ"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if (self.label == 1) != (self.attack is not None):
            raise ValueError("label 1 requires an attack record and label 0 forbids one")
        if np.any(self.bus_block[~self.bus_mask]) or np.any(self.line_block[~self.line_mask]):
            raise ValueError("masked-out block cells must be zero")


def _attacks_equal(a: AttackRecord | None, b: AttackRecord | None) -> bool:
    if a is None or b is None:
        return a is b
    rates_equal = a.achieved_rate == b.achieved_rate or (
        math.isnan(a.achieved_rate) and math.isnan(b.achieved_rate)
    )
    return (
        a.spec == b.spec
        and a.c2 == b.c2
        and rates_equal
        and a.affected == b.affected
        and np.array_equal(a.a, b.a)
    )


def frames_equal(a: MeasurementFrame, b: MeasurementFrame) -> bool:
    """Bitwise equality of two frames, attack records included."""
    return (
        a.t == b.t
        and a.label == b.label
        and np.array_equal(a.bus_block, b.bus_block)
        and np.array_equal(a.line_block, b.line_block)
        and np.array_equal(a.bus_mask, b.bus_mask)
        and np.array_equal(a.line_mask, b.line_mask)
        and _attacks_equal(a.attack, b.attack)
    )


class SimStep(NamedTuple):
    """A simulated step: the true state, the full-precision measurement vector
    actually drawn, and its float32 frame image."""

    state: StateVector
    z: np.ndarray
    frame: MeasurementFrame


def simulate_timeseries(
    grid: GridModel,
    profiles: ProfileSeries,
    noise: NoiseConfig | None = None,
    seed: int = 0,
) -> list[SimStep]:
    """Simulate one clean measurement frame per profile step.

    Each step scales every non-slack bus's setpoints by its profile factors,
    solves the power flow, evaluates the measurement function, and adds
    zero-mean Gaussian noise with per-channel sigmas drawn from a per-frame
    child stream of ``seed``. The slack bus absorbs the resulting imbalance,
    so its own factors are ignored. With all sigmas zero the measurement
    vector equals the exact measurement function output.
    """
    if noise is None:
        noise = NoiseConfig()
    plan = grid.measurement_plan
    layout = BlockLayout.from_plan(plan)
    sigmas = noise.sigmas(plan)
    streams = np.random.SeedSequence(seed).spawn(profiles.n_steps)
    steps: list[SimStep] = []
    for t in range(profiles.n_steps):
        injections = {}
        for bus in grid.buses:
            if bus.id == grid.slack_bus:
                continue
            f = profiles.factors_for(bus.id, t)
            injections[bus.id] = (
                bus.p_gen * f[2] - bus.p_load * f[0],
                bus.q_gen * f[3] - bus.q_load * f[1],
            )
        try:
            state = solve_power_flow(grid, injections)
        except NonConvergenceError as exc:
            raise SimulationError(f"power flow did not converge at step {t}: {exc}") from exc
        rng = np.random.default_rng(streams[t])
        z = measurement_function(state, grid) + sigmas * rng.standard_normal(len(plan))
        bus_block, line_block = layout.blocks(z)
        frame = MeasurementFrame(
            t=t,
            bus_block=bus_block,
            line_block=line_block,
            bus_mask=layout.bus_mask,
            line_mask=layout.line_mask,
            label=0,
        )
        steps.append(SimStep(state=state, z=z, frame=frame))
    return steps


@dataclass(frozen=True)
class AttackSkip:
    """One attack variant that had to be abandoned at some step."""

    t: int
    attack_type: str
    variable: str
    reason: str


def generate_attacked_frames(
    steps: Sequence[SimStep],
    grid: GridModel,
    seed: int = 0,
    retry_limit: int = ATTACK_RETRY_LIMIT,
    gap_limit: float = STEALTH_GAP_LIMIT,
    alpha: float = 0.05,
) -> tuple[list[MeasurementFrame], list[AttackSkip]]:
    """Craft six labeled attacked frames against every clean step.

    Per step, six distinct non-slack injection buses are drawn without
    replacement and paired with the six type/variable combinations, each with
    a random sign. Every attack is calibrated against the step's estimated
    state and only kept if its residual gap stays within ``gap_limit``; a
    variant that fails calibration or verification is retried on further
    buses up to ``retry_limit`` attempts, then skipped and logged. Target
    draws come from a per-step child stream of ``seed``, so any subset of
    steps can be generated independently with identical results.
    """
    candidates = [b for b in grid.injection_buses() if b != grid.slack_bus]
    needed = len(_ATTACK_COMBOS)
    if len(candidates) < needed:
        raise ValueError(
            f"need at least {needed} non-slack injection buses, grid has {len(candidates)}"
        )
    layout = BlockLayout.from_plan(grid.measurement_plan)
    streams = np.random.SeedSequence(seed).spawn(len(steps))
    attacked: list[MeasurementFrame] = []
    skips: list[AttackSkip] = []
    for step, stream in zip(steps, streams):
        t = step.frame.t
        rng = np.random.default_rng(stream)
        order = [candidates[i] for i in rng.permutation(len(candidates))]
        try:
            x_hat = wls_estimate(step.z, grid).x_hat
        except EstimationError as exc:
            for attack_type, variable in _ATTACK_COMBOS:
                skips.append(
                    AttackSkip(
                        t=t,
                        attack_type=attack_type,
                        variable=variable,
                        reason=f"state estimation failed: {exc}",
                    )
                )
            continue
        claimed: set[int] = set()
        for attack_type, variable in _ATTACK_COMBOS:
            record = None
            failure = "no injection bus left to try"
            attempts = 0
            for bus in order:
                if bus in claimed:
                    continue
                if attempts >= retry_limit:
                    break
                attempts += 1
                sign = 1 if rng.integers(0, 2) == 0 else -1
                spec = AttackSpec(
                    target_bus=bus, variable=variable, attack_type=attack_type, sign=sign
                )
                try:
                    rec = calibrate_attack(grid, x_hat, spec)
                    check = verify_stealth(step.z, rec, grid, alpha=alpha)
                except (AttackError, EstimationError) as exc:
                    failure = f"bus {bus}: {exc}"
                    continue
                if check.residual_gap > gap_limit:
                    failure = f"bus {bus}: residual gap {check.residual_gap:.3e} above {gap_limit:.1e}"
                    continue
                record = rec
                claimed.add(bus)
                break
            if record is None:
                skips.append(
                    AttackSkip(t=t, attack_type=attack_type, variable=variable, reason=failure)
                )
                continue
            bus_block, line_block = layout.blocks(step.z + record.a)
            attacked.append(
                MeasurementFrame(
                    t=t,
                    bus_block=bus_block,
                    line_block=line_block,
                    bus_mask=layout.bus_mask,
                    line_mask=layout.line_mask,
                    label=1,
                    attack=record,
                )
            )
    return attacked, skips


@dataclass(frozen=True, eq=False)
class MeasurementWindow:
    """A run of strictly consecutive frames; the final frame sets the label.

    History frames must be clean. An attacked window is therefore a clean
    history with an attacked frame in the final slot.
    """

    frames: tuple[MeasurementFrame, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) < 2:
            raise ValueError("a window needs at least two frames")
        t0 = self.frames[0].t
        for i, frame in enumerate(self.frames):
            if frame.t != t0 + i:
                raise ValueError(
                    f"frames must be consecutive in t; slot {i} has t={frame.t}, expected {t0 + i}"
                )
        if any(frame.label != 0 for frame in self.frames[:-1]):
            raise ValueError("history frames must be clean")

    @property
    def label(self) -> int:
        return self.frames[-1].label

    @property
    def history(self) -> tuple[MeasurementFrame, ...]:
        return self.frames[:-1]

    @property
    def final(self) -> MeasurementFrame:
        return self.frames[-1]

    def bus_tensor(self) -> np.ndarray:
        """Stacked bus blocks, shape (T+1, m_bus, len(BUS_CHANNELS))."""
        return np.stack([f.bus_block for f in self.frames])

    def line_tensor(self) -> np.ndarray:
        """Stacked line blocks, shape (T+1, m_line, len(LINE_CHANNELS))."""
        return np.stack([f.line_block for f in self.frames])


def build_windows(
    clean_frames: Sequence[MeasurementFrame],
    history: int = WINDOW_HISTORY,
    attacked_frames: Iterable[MeasurementFrame] = (),
) -> list[MeasurementWindow]:
    """Slide windows of ``history + 1`` frames over a clean run.

    One clean window ends at every clean frame with at least ``history``
    predecessors, and every attacked frame with a full clean history yields
    one window with that history and the attacked frame in the final slot.
    The result is ordered chronologically by final frame, clean first at any
    given step.
    """
    if history < 1:
        raise ValueError(f"history must be at least 1, got {history}")
    ordered = sorted(clean_frames, key=lambda f: f.t)
    if not ordered:
        raise ValueError("no clean frames")
    t0 = ordered[0].t
    for i, frame in enumerate(ordered):
        if frame.label != 0:
            raise ValueError(f"clean frame at t={frame.t} has label {frame.label}")
        if frame.t != t0 + i:
            raise ValueError(f"clean frames must be consecutive in t; got gap before t={frame.t}")
    by_t = {frame.t: frame for frame in ordered}
    windows = [
        MeasurementWindow(frames=tuple(ordered[i - history : i + 1]))
        for i in range(history, len(ordered))
    ]
    for frame in attacked_frames:
        if frame.label != 1:
            raise ValueError(f"attacked frame at t={frame.t} has label {frame.label}")
        if frame.t not in by_t:
            raise ValueError(f"attacked frame at t={frame.t} has no clean base step")
        if frame.t - history < t0:
            continue
        hist = tuple(by_t[frame.t - history + i] for i in range(history))
        windows.append(MeasurementWindow(frames=hist + (frame,)))
    windows.sort(key=lambda w: (w.final.t, w.label))
    return windows


class SplitResult(NamedTuple):
    train: list[MeasurementWindow]
    test: list[MeasurementWindow]


def split_train_test(
    windows: Sequence[MeasurementWindow],
    train_days: int | None = None,
    test_days: int | None = None,
    steps_per_day: int = STEPS_PER_DAY,
) -> SplitResult:
    """Split windows chronologically at a day boundary.

    Day budgets default to the 312:366 reference proportion of the available
    span (train floored, remainder test). A window belongs to the training
    set only if all its frames fall in training days, to the test set only if
    all fall in test days; windows straddling the boundary are dropped so no
    frame is shared across the split.
    """
    if not windows:
        raise InsufficientDaysError("no windows to split")
    days = max(w.final.t for w in windows) // steps_per_day + 1
    if train_days is None and test_days is None:
        train_days = days * TRAIN_DAYS_REFERENCE // TOTAL_DAYS_REFERENCE
        test_days = days - train_days
    elif train_days is None:
        train_days = days - test_days
    elif test_days is None:
        test_days = days - train_days
    if train_days < 1 or test_days < 1 or train_days + test_days > days:
        raise InsufficientDaysError(
            f"cannot split {days} available days into {train_days} training"
            f" and {test_days} testing days"
        )
    boundary = train_days * steps_per_day
    end = (train_days + test_days) * steps_per_day
    train = [w for w in windows if w.final.t < boundary and w.frames[0].t >= 0]
    test = [w for w in windows if w.frames[0].t >= boundary and w.final.t < end]
    return SplitResult(train=train, test=test)


def grid_digest(grid: GridModel) -> str:
    """SHA-256 over the canonical JSON form of a grid."""
    doc = json.dumps(grid_to_dict(grid), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass(frozen=True)
class DatasetConfig:
    """Generation settings echoed into the dataset container."""

    days: int
    seed_simulate: int
    seed_attack: int
    alpha: float = 0.05
    noise: NoiseConfig = NoiseConfig()
    window_history: int = WINDOW_HISTORY
    steps_per_day: int = STEPS_PER_DAY
    stealth_gap_limit: float = STEALTH_GAP_LIMIT

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["noise"] = self.noise.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        doc = dict(doc)
        doc["noise"] = NoiseConfig.from_dict(doc["noise"])
        return cls(**doc)


@dataclass(eq=False)
class Dataset:
    """Frames plus everything needed to reproduce and audit them."""

    grid_digest: str
    config: DatasetConfig
    frames: list[MeasurementFrame]
    skips: list[AttackSkip] = field(default_factory=list)

    def clean_frames(self) -> list[MeasurementFrame]:
        return [f for f in self.frames if f.label == 0]

    def attacked_frames(self) -> list[MeasurementFrame]:
        return [f for f in self.frames if f.label == 1]

    def windows(self, history: int | None = None) -> list[MeasurementWindow]:
        if history is None:
            history = self.config.window_history
        return build_windows(self.clean_frames(), history, self.attacked_frames())


def build_dataset(
    grid: GridModel,
    profiles: ProfileSeries,
    config: DatasetConfig | None = None,
    seed_simulate: int = 0,
    seed_attack: int = 1,
) -> Dataset:
    """Simulate, attack, and package one dataset in a single call."""
    if config is None:
        config = DatasetConfig(
            days=profiles.days, seed_simulate=seed_simulate, seed_attack=seed_attack
        )
    steps = simulate_timeseries(grid, profiles, noise=config.noise, seed=config.seed_simulate)
    attacked, skips = generate_attacked_frames(
        steps,
        grid,
        seed=config.seed_attack,
        gap_limit=config.stealth_gap_limit,
        alpha=config.alpha,
    )
    frames = [s.frame for s in steps] + attacked
    return Dataset(grid_digest=grid_digest(grid), config=config, frames=frames, skips=skips)


class _Reader:
    """Cursor over a byte buffer that fails loudly on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(
                f"truncated dataset: needed {n} bytes for {what},"
                f" got {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _write_frame(out: io.BytesIO, frame: MeasurementFrame) -> None:
    out.write(struct.pack("<IBBH", frame.t, frame.label, int(frame.attack is not None), 0))
    out.write(np.ascontiguousarray(frame.bus_block, dtype="<f4").tobytes())
    out.write(np.ascontiguousarray(frame.line_block, dtype="<f4").tobytes())
    mask_bits = np.concatenate([frame.bus_mask.ravel(), frame.line_mask.ravel()])
    out.write(np.packbits(mask_bits).tobytes())
    if frame.attack is None:
        return
    rec = frame.attack
    out.write(
        struct.pack(
            "<IBBbB",
            rec.spec.target_bus,
            _VARIABLE_CODES[rec.spec.variable],
            _TYPE_CODES[rec.spec.attack_type],
            rec.spec.sign,
            0,
        )
    )
    out.write(struct.pack("<dd", rec.c2, rec.achieved_rate))
    affected = np.array(sorted(rec.affected), dtype="<u4")
    out.write(struct.pack("<I", len(affected)))
    out.write(affected.tobytes())
    out.write(struct.pack("<I", len(rec.a)))
    out.write(np.ascontiguousarray(rec.a, dtype="<f8").tobytes())


def _read_frame(reader: _Reader, bus_shape: tuple, line_shape: tuple) -> MeasurementFrame:
    t, label, has_attack, _ = reader.unpack("<IBBH", "frame header")
    bus_block = reader.array("<f4", int(np.prod(bus_shape)), "bus block").reshape(bus_shape)
    line_block = reader.array("<f4", int(np.prod(line_shape)), "line block").reshape(line_shape)
    n_mask = int(np.prod(bus_shape)) + int(np.prod(line_shape))
    packed = reader.array("u1", (n_mask + 7) // 8, "masks")
    bits = np.unpackbits(packed, count=n_mask).astype(bool)
    bus_mask = bits[: int(np.prod(bus_shape))].reshape(bus_shape)
    line_mask = bits[int(np.prod(bus_shape)) :].reshape(line_shape)
    attack = None
    if has_attack:
        target, var_code, type_code, sign, _ = reader.unpack("<IBBbB", "attack spec")
        try:
            variable = ATTACK_VARIABLES[var_code]
            attack_type = ATTACK_TYPES[type_code]
        except IndexError as exc:
            raise DatasetFormatError(f"unknown attack code in frame at t={t}") from exc
        c2, rate = reader.unpack("<dd", "attack scalars")
        (n_affected,) = reader.unpack("<I", "affected count")
        affected = reader.array("<u4", n_affected, "affected indices")
        (a_len,) = reader.unpack("<I", "attack vector length")
        a = reader.array("<f8", a_len, "attack vector")
        attack = AttackRecord(
            spec=AttackSpec(
                target_bus=target, variable=variable, attack_type=attack_type, sign=sign
            ),
            c2=c2,
            a=a,
            affected=frozenset(int(i) for i in affected),
            achieved_rate=rate,
        )
    return MeasurementFrame(
        t=t,
        bus_block=bus_block,
        line_block=line_block,
        bus_mask=bus_mask,
        line_mask=line_mask,
        label=label,
        attack=attack,
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset to its little-endian binary container."""
    if dataset.frames:
        bus_shape = dataset.frames[0].bus_block.shape
        line_shape = dataset.frames[0].line_block.shape
        plan_len = int(dataset.frames[0].bus_mask.sum() + dataset.frames[0].line_mask.sum())
    else:
        bus_shape = (0, len(BUS_CHANNELS))
        line_shape = (0, len(LINE_CHANNELS))
        plan_len = 0
    meta = {
        "grid_digest": dataset.grid_digest,
        "config": dataset.config.to_dict(),
        "skips": [asdict(s) for s in dataset.skips],
        "m_bus": bus_shape[0],
        "m_line": line_shape[0],
        "plan_len": plan_len,
        "n_frames": len(dataset.frames),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<II", DATASET_VERSION, len(meta_bytes)))
    out.write(meta_bytes)
    for frame in dataset.frames:
        if frame.bus_block.shape != bus_shape or frame.line_block.shape != line_shape:
            raise ValueError("all frames in a dataset must share one block shape")
        _write_frame(out, frame)
    Path(path).write_bytes(out.getvalue())


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset container back, bit-exactly, or fail without a result."""
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(len(DATASET_MAGIC), "magic")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"not a dataset file: magic {magic!r}")
    version, meta_len = reader.unpack("<II", "version header")
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"unsupported dataset version {version}")
    try:
        meta = json.loads(reader.take(meta_len, "metadata").decode())
        config = DatasetConfig.from_dict(meta["config"])
        skips = [AttackSkip(**doc) for doc in meta["skips"]]
        digest = meta["grid_digest"]
        n_frames = meta["n_frames"]
        bus_shape = (meta["m_bus"], len(BUS_CHANNELS))
        line_shape = (meta["m_line"], len(LINE_CHANNELS))
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"bad dataset metadata: {exc}") from exc
    frames = [_read_frame(reader, bus_shape, line_shape) for _ in range(n_frames)]
    if not reader.done():
        raise DatasetFormatError(f"{len(reader.data) - reader.pos} trailing bytes after frames")
    return Dataset(grid_digest=digest, config=config, frames=frames, skips=skips)
