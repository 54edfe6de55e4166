"""Stealthy measurement attacks: crafting, calibration, and verification."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import nominal_injections
from powerfd.attack import (
    AttackSpec,
    C2_MAX,
    CalibrationInfeasibleError,
    NearZeroInjectionError,
    TYPE_RATE_RANGES,
    AttackRecord,
    affected_measurements,
    calibrate_attack,
    craft_attack,
    verify_stealth,
)
from powerfd.estimation import wls_estimate
from powerfd.grid import (
    Branch,
    Bus,
    GridModel,
    MeasurementDescriptor,
    MeasurementKind,
    MeasurementPlan,
    build_admittance,
)
from powerfd.powerflow import (
    StateVector,
    bus_injection,
    line_flow,
    measurement_function,
    solve_power_flow,
)


def lossless_two_bus() -> GridModel:
    buses = (Bus(0, 0.0, 0.0, 0.3, 0.05), Bus(1, 0.25, 0.04, 0.0, 0.0))
    branches = (Branch(0, 1, 0.0, -8.0),)
    plan = MeasurementPlan((
        MeasurementDescriptor(MeasurementKind.BUS_P, 0, 0.006),
        MeasurementDescriptor(MeasurementKind.BUS_P, 1, 0.006),
        MeasurementDescriptor(MeasurementKind.BUS_Q, 1, 0.006),
        MeasurementDescriptor(MeasurementKind.BUS_V, 0, 0.003),
        MeasurementDescriptor(MeasurementKind.BUS_V, 1, 0.003),
    ))
    return GridModel(buses=buses, branches=branches, slack_bus=0, base_mva=100.0,
                     measurement_plan=plan)


def noisy_frame(rng: np.random.Generator, grid: GridModel, truth: StateVector) -> np.ndarray:
    return measurement_function(truth, grid) + rng.normal(0.0, grid.measurement_plan.sigmas())


class TestAttackSpec:
    def test_rejects_unknown_variable(self):
        with pytest.raises(ValueError):
            AttackSpec(1, "frequency", "A")

    def test_rejects_unknown_type(self):
        with pytest.raises(ValueError):
            AttackSpec(1, "Vm", "D")

    def test_rejects_bad_sign(self):
        with pytest.raises(ValueError):
            AttackSpec(1, "Vm", "A", sign=0)


class TestAffectedMeasurements:
    def test_grid4_hand_enumeration(self, grid4):
        # Bus 3 neighbors buses 1 and 2 through branches 3 and 4. Plan
        # order: three bus channels per bus, then six line channels per
        # branch starting at index 12.
        expected = {3, 4, 6, 7, 9, 10, 11}
        expected |= set(range(12 + 3 * 6, 12 + 5 * 6))
        assert affected_measurements(grid4, 3) == frozenset(expected)

    def test_voltage_rows_only_at_target(self, grid4):
        for bus in range(4):
            aff = affected_measurements(grid4, bus)
            for idx, entry in enumerate(grid4.measurement_plan):
                if entry.kind is MeasurementKind.BUS_V:
                    assert (idx in aff) == (entry.location == bus)

    def test_matches_dependency_probe(self, grid4, grid4_truth):
        # Ground truth by perturbation: an index is affected exactly when
        # the measurement model responds to the target bus's state.
        h0 = measurement_function(grid4_truth, grid4)
        eps = 1e-4
        for bus in range(4):
            changed: set[int] = set()
            for var in ("theta", "v"):
                if var == "theta" and bus == grid4.slack_bus:
                    continue
                probe = grid4_truth.copy()
                (probe.theta if var == "theta" else probe.v)[bus] += eps
                delta = np.abs(measurement_function(probe, grid4) - h0)
                changed |= set(np.nonzero(delta > 1e-10)[0].tolist())
            assert changed == set(affected_measurements(grid4, bus))

    def test_nonexistent_bus_rejected(self, grid4):
        with pytest.raises(ValueError):
            affected_measurements(grid4, 9)


class TestCraftAttack:
    def estimate(self, grid4, grid4_truth):
        rng = np.random.default_rng(71)
        z = noisy_frame(rng, grid4, grid4_truth)
        return z, wls_estimate(z, grid4).x_hat

    def test_zero_size_yields_zero_vector(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        rec = craft_attack(grid4, x_hat, AttackSpec(2, "Vm", "B"), 0.0)
        np.testing.assert_array_equal(rec.a, np.zeros(len(grid4.measurement_plan)))
        assert rec.achieved_rate == 0.0

    def test_support_is_exactly_affected_set(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        rec = craft_attack(grid4, x_hat, AttackSpec(3, "Vm", "A"), 0.05)
        outside = np.ones(len(rec.a), dtype=bool)
        outside[list(rec.affected)] = False
        assert np.all(rec.a[outside] == 0.0)
        assert np.count_nonzero(rec.a) > 0
        assert rec.affected == affected_measurements(grid4, 3)

    def test_voltage_entry_carries_the_shift(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        c2 = 0.03
        rec = craft_attack(grid4, x_hat, AttackSpec(1, "Vm", "A"), c2)
        v_idx = grid4.measurement_plan.index_of(MeasurementKind.BUS_V, 1)
        assert rec.a[v_idx] == pytest.approx(c2, abs=1e-15)

    def test_angle_attack_matches_line_flow_deltas(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        c2 = -0.1
        rec = craft_attack(grid4, x_hat, AttackSpec(2, "Va", "B"), c2)
        shifted = x_hat.copy()
        shifted.theta[2] += c2
        for branch_idx in grid4.incident_branches(2):
            branch = grid4.branches[branch_idx]
            idx = grid4.measurement_plan.index_of(MeasurementKind.LINE_P_IN, branch_idx)
            expected = line_flow(shifted, branch, "in")[0] - line_flow(x_hat, branch, "in")[0]
            assert rec.a[idx] == pytest.approx(expected, abs=1e-15)

    def test_achieved_rate_matches_injection_change(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        c2 = 0.04
        rec = craft_attack(grid4, x_hat, AttackSpec(1, "Vm", "A"), c2)
        y = build_admittance(grid4)
        shifted = x_hat.copy()
        shifted.v[1] += c2
        p0 = bus_injection(x_hat, y, 1)[0]
        p1 = bus_injection(shifted, y, 1)[0]
        assert rec.achieved_rate == pytest.approx(abs(p1 - p0) / abs(p0), rel=1e-12)

    def test_slack_angle_rejected(self, grid4, grid4_truth):
        _, x_hat = self.estimate(grid4, grid4_truth)
        with pytest.raises(ValueError):
            craft_attack(grid4, x_hat, AttackSpec(0, "Va", "A"), 0.1)

    def test_injectionless_bus_rejected(self):
        # Middle bus of a three-bus chain carries no load or generation.
        buses = (Bus(0, 0.0, 0.0, 0.2, 0.05), Bus(1, 0.0, 0.0, 0.0, 0.0),
                 Bus(2, 0.2, 0.05, 0.0, 0.0))
        branches = (Branch(0, 1, 1.0, -8.0), Branch(1, 2, 1.0, -8.0))
        plan = MeasurementPlan(tuple(
            MeasurementDescriptor(kind, b, 0.003 if kind is MeasurementKind.BUS_V else 0.006)
            for b in range(3)
            for kind in (MeasurementKind.BUS_P, MeasurementKind.BUS_Q, MeasurementKind.BUS_V)
        ))
        grid = GridModel(buses=buses, branches=branches, slack_bus=0, base_mva=100.0,
                         measurement_plan=plan)
        state = solve_power_flow(grid, {1: (0.0, 0.0), 2: (-0.2, -0.05)})
        with pytest.raises(ValueError):
            craft_attack(grid, state, AttackSpec(1, "Vm", "A"), 0.05)


class TestCalibrateAttack:
    @pytest.mark.parametrize("attack_type", ["A", "B", "C"])
    @pytest.mark.parametrize("variable", ["Vm", "Va"])
    def test_achieved_rate_lands_in_type_range(self, grid4, grid4_truth, attack_type, variable):
        rng = np.random.default_rng(73)
        z = noisy_frame(rng, grid4, grid4_truth)
        x_hat = wls_estimate(z, grid4).x_hat
        lo, hi = TYPE_RATE_RANGES[attack_type]
        for bus in (1, 2, 3):
            for sign in (1, -1):
                rec = calibrate_attack(grid4, x_hat, AttackSpec(bus, variable, attack_type, sign))
                assert lo < rec.achieved_rate <= hi
                assert abs(rec.c2) <= C2_MAX[variable]
                assert np.sign(rec.c2) == sign

    def test_near_zero_injection_rejected(self, grid4):
        # At a flat state every net injection is exactly zero, so no rate
        # is defined.
        with pytest.raises(NearZeroInjectionError):
            calibrate_attack(grid4, StateVector.flat(4), AttackSpec(1, "Vm", "A"))

    def test_out_of_reach_rate_is_infeasible(self):
        # On a lossless branch the active flow scales linearly with the
        # target voltage, so the rate tops out near c2_max / V, below the
        # type A and B floors.
        grid = lossless_two_bus()
        state = solve_power_flow(grid, {1: (-0.25, -0.04)})
        for attack_type in ("A", "B"):
            with pytest.raises(CalibrationInfeasibleError):
                calibrate_attack(grid, state, AttackSpec(1, "Vm", attack_type))

    def test_cap_sized_attack_accepted_when_in_range(self):
        grid = lossless_two_bus()
        state = solve_power_flow(grid, {1: (-0.25, -0.04)})
        rec = calibrate_attack(grid, state, AttackSpec(1, "Vm", "C"))
        assert rec.c2 == C2_MAX["Vm"]
        lo, hi = TYPE_RATE_RANGES["C"]
        assert lo < rec.achieved_rate <= hi


class TestVerifyStealth:
    def test_null_attack_changes_nothing(self, grid4, grid4_truth):
        rng = np.random.default_rng(79)
        z = noisy_frame(rng, grid4, grid4_truth)
        x_hat = wls_estimate(z, grid4).x_hat
        rec = craft_attack(grid4, x_hat, AttackSpec(1, "Vm", "A"), 0.0)
        check = verify_stealth(z, rec, grid4)
        assert check.residual_gap <= 1e-15
        assert check.clean_verdict.statistic == check.attacked_verdict.statistic

    def test_calibrated_attacks_preserve_residual_norm(self, grid4, grid4_truth):
        rng = np.random.default_rng(83)
        for _ in range(2):
            z = noisy_frame(rng, grid4, grid4_truth)
            x_hat = wls_estimate(z, grid4).x_hat
            for bus in (1, 2, 3):
                for variable in ("Vm", "Va"):
                    for attack_type in ("A", "B", "C"):
                        rec = calibrate_attack(grid4, x_hat,
                                               AttackSpec(bus, variable, attack_type))
                        check = verify_stealth(z, rec, grid4)
                        assert check.residual_gap <= 1e-6
                        assert check.attacked_verdict.flagged == check.clean_verdict.flagged

    def test_attacked_estimate_absorbs_the_shift(self, grid4, grid4_truth):
        rng = np.random.default_rng(89)
        z = noisy_frame(rng, grid4, grid4_truth)
        x_hat = wls_estimate(z, grid4).x_hat
        rec = calibrate_attack(grid4, x_hat, AttackSpec(2, "Vm", "B"))
        poisoned = wls_estimate(z + rec.a, grid4).x_hat
        assert poisoned.v[2] - x_hat.v[2] == pytest.approx(rec.c2, abs=1e-8)
        np.testing.assert_allclose(poisoned.theta, x_hat.theta, atol=1e-8)

    def test_equal_norm_random_vector_is_not_stealthy(self, grid4, grid4_truth):
        rng = np.random.default_rng(97)
        z = noisy_frame(rng, grid4, grid4_truth)
        x_hat = wls_estimate(z, grid4).x_hat
        rec = calibrate_attack(grid4, x_hat, AttackSpec(3, "Va", "A"))
        noise = rng.normal(size=rec.a.shape)
        noise *= np.linalg.norm(rec.a) / np.linalg.norm(noise)
        blunt = AttackRecord(spec=rec.spec, c2=rec.c2, a=noise,
                             affected=rec.affected, achieved_rate=rec.achieved_rate)
        check = verify_stealth(z, blunt, grid4)
        assert check.residual_gap > 1e-3
        assert check.attacked_verdict.flagged
        assert not check.clean_verdict.flagged
