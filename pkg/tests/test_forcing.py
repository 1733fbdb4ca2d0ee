import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhkick.cycle import asymptotic_phase
from hhkick.forcing import (
    Box,
    DriveConfig,
    Impulse,
    KickSpec,
    cycle_seed,
    driven_orbit,
    driven_trace,
    find_periodic_orbit,
    kick,
    map_jacobian,
    periodic_residual,
    polish_periodic_orbit,
    time_T_map,
)
from hhkick.models import HHParams, hh_rhs
from hhkick.numerics import IntegratorConfig, integrate

TIGHT = IntegratorConfig(abs_tolerance=1e-10, initial_step=1e-3, max_step=0.1, min_step=1e-14)


def circ(a, b, T0):
    return abs((a - b + T0 / 2) % T0 - T0 / 2)


class TestKickSpec:
    def test_box_height_matches_charge(self):
        k = KickSpec(10.0, Box(0.5))
        assert k.height * k.width == pytest.approx(10.0)
        assert not k.is_impulse

    def test_box_width_positive(self):
        with pytest.raises(ValueError):
            Box(0.0)

    def test_period_must_cover_pulse(self):
        with pytest.raises(ValueError):
            DriveConfig.box(10.0, 5.0, 4.0)
        with pytest.raises(ValueError):
            DriveConfig.impulse(10.0, 0.0)


class TestKick:
    def test_zero_amplitude_identity(self):
        x = np.array([-3.0, 0.1, 0.4, 0.5])
        assert np.array_equal(kick(x, KickSpec(0.0)), x)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-100, 20))
    def test_impulse_shifts_voltage_only(self, A, v):
        x = np.array([v, 0.1, 0.4, 0.5])
        y = kick(x, KickSpec(A, Impulse()))
        assert y[0] == x[0] + A
        assert np.array_equal(y[1:], x[1:])

    def test_box_is_constant_current_delivery(self, cycle):
        x = cycle.point(3.0)
        box = kick(x, KickSpec(10.0, Box(0.3)), cfg=TIGHT)
        ref = integrate(hh_rhs, x, 0.3, TIGHT, HHParams().pack(extra_current=10.0 / 0.3))
        assert np.allclose(box, ref, atol=1e-8)

    @pytest.mark.parametrize("theta", [0.0, 2.0, 5.0, 9.0, 12.0])
    def test_short_box_close_to_impulse(self, cycle, theta):
        t0 = 0.05
        x = cycle.point(theta)
        box = kick(x, KickSpec(10.0, Box(t0)))
        imp = integrate(hh_rhs, kick(x, KickSpec(10.0)), t0, TIGHT, cycle.packed)
        assert np.max(np.abs(box - imp)) < 0.5


class TestTimeTMap:
    def test_zero_amplitude_is_flow(self, cycle):
        x = cycle.point(3.0)
        y = time_T_map(x, DriveConfig.impulse(0.0, 17.0))
        assert np.allclose(y, integrate(hh_rhs, x, 17.0, p=cycle.packed), atol=1e-5)

    def test_period_one_entrainment(self):
        d = DriveConfig.impulse(10.0, 26.0)
        x, q = find_periodic_orbit(cycle_seed(), d)
        assert q == 1
        assert np.linalg.norm(time_T_map(x, d, cfg=TIGHT) - x) < 1e-6
        assert periodic_residual(x, d, q=1) < 1e-8

    def test_polish_is_contracting(self):
        d = DriveConfig.impulse(10.0, 26.0)
        x, _ = find_periodic_orbit(cycle_seed(), d)
        _, J = map_jacobian(x, d)
        ev = np.abs(np.linalg.eigvals(J))
        assert ev.max() < 1.0
        assert np.allclose(polish_periodic_orbit(x + 1e-4, d), x, atol=1e-8)

    @pytest.mark.parametrize("T", [40.0, 55.0, 71.0])
    def test_shift_by_period_shadows(self, cycle, T):
        x = cycle.point(4.2) + np.array([0.2, 0.001, -0.001, 0.0])
        a = asymptotic_phase(time_T_map(x, DriveConfig.impulse(10.0, T), cfg=TIGHT), cycle)
        b = asymptotic_phase(time_T_map(x, DriveConfig.impulse(10.0, T + cycle.T0), cfg=TIGHT), cycle)
        assert circ(a, b, cycle.T0) < 0.05

    def test_box_converges_to_impulse(self, cycle):
        x = cycle.point(6.0)
        ref = time_T_map(x, DriveConfig.impulse(10.0, 20.0), cfg=TIGHT)
        gaps = [np.max(np.abs(time_T_map(x, DriveConfig.box(10.0, t0, 20.0), cfg=TIGHT) - ref))
                for t0 in (1.0, 0.1, 0.01)]
        assert gaps[0] > gaps[1] > gaps[2]


class TestDrivenOrbit:
    def test_single_step_is_time_T_map(self, cycle):
        d = DriveConfig.impulse(10.0, 20.0)
        x = cycle.point(1.0)
        orb = driven_orbit(x, d, n=1)
        assert np.array_equal(orb.states[0], x)
        assert np.allclose(orb.states[1], time_T_map(x, d), atol=1e-12)

    def test_n_must_be_positive(self, cycle):
        with pytest.raises(ValueError):
            driven_orbit(cycle.x0, DriveConfig.impulse(1.0, 20.0), n=0)

    def test_rigid_rotation_without_kicks(self, cycle):
        T = 17.3
        orb = driven_orbit(cycle.x0, DriveConfig.impulse(0.0, T), n=6, cfg=TIGHT)
        phases = [asymptotic_phase(x, cycle) for x in orb.states]
        for a, b in zip(phases, phases[1:]):
            assert circ(b - a, T, cycle.T0) < 1e-3

    def test_chaotic_separation(self):
        # (A, T) = (40, 73) is classified chaotic by the Lyapunov estimate
        d = DriveConfig.impulse(40.0, 73.0)
        x0 = driven_orbit(cycle_seed(), d, n=100).states[-1]
        a = driven_orbit(x0, d, n=60).states
        b = driven_orbit(x0 + np.array([1e-8, 0, 0, 0]), d, n=60).states
        assert np.linalg.norm(a - b, axis=1).max() > 1.0

    def test_tangent_growth_matches_finite_difference(self, cycle):
        d = DriveConfig.impulse(10.0, 20.0)
        x = cycle.point(2.0)
        w0 = np.array([0.3, 0.01, -0.02, 0.01])
        orb = driven_orbit(x, d, n=3, w0=w0, cfg=TIGHT)
        w = orb.tangent * np.exp(orb.log_growth.sum())
        h = 1e-6
        fd = (driven_orbit(x + h * w0, d, n=3, cfg=TIGHT).states[-1]
              - driven_orbit(x - h * w0, d, n=3, cfg=TIGHT).states[-1]) / (2 * h)
        assert np.linalg.norm(w - fd) / np.linalg.norm(fd) < 0.01

    def test_box_tangent_matches_finite_difference(self, cycle):
        d = DriveConfig.box(10.0, 2.75, 20.0)
        x = cycle.point(8.0)
        w0 = np.array([1.0, 0.0, 0.0, 0.0])
        orb = driven_orbit(x, d, n=2, w0=w0, cfg=TIGHT)
        w = orb.tangent * np.exp(orb.log_growth.sum())
        h = 1e-6
        fd = (driven_orbit(x + h * w0, d, n=2, cfg=TIGHT).states[-1]
              - driven_orbit(x - h * w0, d, n=2, cfg=TIGHT).states[-1]) / (2 * h)
        assert np.linalg.norm(w - fd) / np.linalg.norm(fd) < 0.01

    def test_deterministic(self, cycle):
        d = DriveConfig.box(20.0, 0.3, 31.0)
        a = driven_orbit(cycle.x0, d, n=20, w0=np.ones(4))
        b = driven_orbit(cycle.x0, d, n=20, w0=np.ones(4))
        assert np.array_equal(a.states, b.states) and np.array_equal(a.log_growth, b.log_growth)

    def test_csv_columns(self, cycle, tmp_path):
        orb = driven_orbit(cycle.x0, DriveConfig.impulse(10.0, 20.0), n=4)
        orb.to_csv(tmp_path / "orbit.csv")
        with open(tmp_path / "orbit.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "v", "m", "n", "h"]
        assert len(rows) == 6


class TestTrace:
    def test_zero_amplitude_matches_unforced(self, cycle):
        x0 = cycle_seed()
        t, ys = driven_trace(x0, DriveConfig.impulse(0.0, 20.0), duration=30.0)
        t2, ys2 = driven_trace(x0, DriveConfig.impulse(0.0, 7.0), duration=30.0)
        assert np.array_equal(ys, ys2)

    def test_trace_agrees_with_stroboscope(self, cycle):
        d = DriveConfig.impulse(10.0, 20.0)
        x0 = cycle_seed()
        t, ys = driven_trace(x0, d, duration=60.0, dt_out=0.5)
        orb = driven_orbit(x0, d, n=2)
        # sample at t = 40 is taken after the third kick; undo it
        j = int(np.argmin(np.abs(t - 40.0)))
        pre = ys[j] - np.array([10.0, 0, 0, 0])
        assert np.allclose(pre, orb.states[2], atol=1e-4)

    def test_rejects_bad_grid(self, cycle):
        with pytest.raises(ValueError):
            driven_trace(cycle.x0, DriveConfig.impulse(1.0, 20.0), duration=-1.0)
