import math

import numpy as np
import pytest

from treegrid.cosmology import (ScaleFactorState, a_of_z, drift, hubble_rate,
                                kick, lna_schedule, step_coefficients, z_of_a)
from treegrid.domain import CosmologyParams, Particles, hubble0_internal


def flat(omega0=0.3):
    return CosmologyParams(omega0=omega0, lambda0=1.0 - omega0, a_initial=0.01)


class TestScaleFactorState:
    def test_consistency_enforced(self):
        ScaleFactorState.from_z(0.0024)
        with pytest.raises(ValueError):
            ScaleFactorState(a=0.5, z=0.5)


class TestHubbleRate:
    def test_present_day_is_unity(self):
        assert hubble_rate(1.0, flat()) == pytest.approx(1.0, abs=1e-15)

    def test_half_scale_factor(self):
        assert hubble_rate(0.5, flat()) == pytest.approx(math.sqrt(3.1), rel=1e-14)

    def test_tenth_scale_factor(self):
        assert hubble_rate(0.1, flat()) == pytest.approx(math.sqrt(300.7), rel=1e-14)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            hubble_rate(0.0, flat())

    def test_strictly_decreasing_in_a(self):
        c = flat()
        a = np.linspace(0.02, 1.0, 400)
        h = np.array([hubble_rate(x, c) for x in a])
        assert np.all(np.diff(h) < 0)


class TestAOfZ:
    def test_present_day(self):
        assert a_of_z(0.0) == 1.0

    def test_start_redshift(self):
        assert a_of_z(0.0026) == pytest.approx(1.0 / 1.0026, rel=1e-15)

    def test_z_nine(self):
        assert a_of_z(9.0) == pytest.approx(0.1, rel=1e-15)

    def test_rejects_below_minus_one(self):
        with pytest.raises(ValueError):
            a_of_z(-1.0)

    def test_round_trip(self):
        assert z_of_a(a_of_z(3.7)) == pytest.approx(3.7, rel=1e-12)


def trapezoid_coefficients(a0, a1, cosmo, n=1_000_000):
    """Independent brute-force quadrature of the drift/kick integrals."""
    h0 = hubble0_internal(cosmo)
    a = np.linspace(a0, a1, n)
    hub = h0 * np.sqrt(cosmo.omega0 / a**3 + cosmo.lambda0)
    drift_i = np.trapezoid(1.0 / (a**3 * hub), a)
    kick_i = np.trapezoid(1.0 / (a**2 * hub), a)
    return drift_i, kick_i


class TestStepCoefficients:
    def test_empty_interval(self):
        assert step_coefficients(0.5, 0.5, flat()) == (0.0, 0.0)

    def test_inverted_interval_rejected(self):
        with pytest.raises(ValueError):
            step_coefficients(0.6, 0.5, flat())

    def test_against_brute_force_quadrature(self):
        c = flat()
        d, k = step_coefficients(0.99, 1.0, c)
        d_ref, k_ref = trapezoid_coefficients(0.99, 1.0, c)
        assert d == pytest.approx(d_ref, rel=1e-8)
        assert k == pytest.approx(k_ref, rel=1e-8)

    def test_matter_only_closed_form(self):
        # Einstein-de-Sitter: H = H0 a^-1.5, so
        # drift = (2 / H0) (a0^-0.5 - a1^-0.5), kick = (2 / H0)(a1^0.5 - a0^0.5)
        c = CosmologyParams(omega0=1.0, lambda0=0.0, a_initial=0.01)
        h0 = hubble0_internal(c)
        a0, a1 = 0.04, 0.36
        d, k = step_coefficients(a0, a1, c)
        assert d == pytest.approx(2.0 / h0 * (a0**-0.5 - a1**-0.5), rel=1e-6)
        assert k == pytest.approx(2.0 / h0 * (a1**0.5 - a0**0.5), rel=1e-6)

    def test_additive_over_subintervals(self):
        c = flat()
        d13, k13 = step_coefficients(0.2, 0.9, c)
        d12, k12 = step_coefficients(0.2, 0.55, c)
        d23, k23 = step_coefficients(0.55, 0.9, c)
        assert d13 == pytest.approx(d12 + d23, rel=1e-10)
        assert k13 == pytest.approx(k12 + k23, rel=1e-10)


def two_particles():
    return Particles(np.array([0, 1], dtype=np.uint64),
                     np.array([[0.4, 0.5, 0.5], [0.6, 0.5, 0.5]]),
                     np.array([[0.0, 0.1, 0.0], [0.0, -0.1, 0.0]]),
                     np.array([0.5, 0.5]))


class TestKickDrift:
    def test_zero_acceleration_keeps_momenta(self):
        p = two_particles()
        out = kick(p, np.zeros((2, 3)), 0.1)
        assert np.array_equal(out.mom, p.mom)
        assert np.array_equal(out.pos, p.pos)

    def test_kick_never_moves_positions(self):
        p = two_particles()
        out = kick(p, np.ones((2, 3)), 0.25)
        assert np.array_equal(out.pos, p.pos)
        assert np.allclose(out.mom, p.mom + 0.25)

    def test_drift_wraps_positions(self):
        p = Particles(np.array([0], dtype=np.uint64), np.array([[0.9, 0.5, 0.5]]),
                      np.array([[1.0, 0.0, 0.0]]), np.ones(1))
        out = drift(p, 0.2)
        assert out.pos[0, 0] == pytest.approx(0.1, abs=1e-15)
        assert np.array_equal(out.mom, p.mom)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kick(two_particles(), np.zeros((3, 3)), 0.1)

    def test_time_reversibility(self):
        p = two_particles()
        acc = np.array([[0.3, -0.2, 0.1], [-0.3, 0.2, -0.1]])
        c, k = 0.37, 0.21
        back = drift(kick(kick(drift(p, c), acc, k), acc, -k), -c)
        assert np.all(np.abs(back.pos - p.pos) <= 1e-12)
        assert np.all(np.abs(back.mom - p.mom) <= 1e-12)

    def test_circular_orbit_radius_stable(self):
        # expansion off: plain leapfrog on an isolated equal-mass pair,
        # a full period in 256 steps, direct Newtonian pair force
        m = 0.5
        d = 0.02
        v = math.sqrt(2.0 * m / d) / 2.0   # circular speed about the barycenter
        period = 2.0 * math.pi * (d / 2.0) / v
        dt = period / 256.0
        pos = np.array([[0.5 - d / 2, 0.5, 0.5], [0.5 + d / 2, 0.5, 0.5]])
        mom = np.array([[0.0, v, 0.0], [0.0, -v, 0.0]])
        p = Particles(np.array([0, 1], dtype=np.uint64), pos, mom,
                      np.array([m, m]))

        def accel(parts):
            r = parts.pos[1] - parts.pos[0]
            rr = np.linalg.norm(r)
            a0 = m * r / rr**3
            return np.array([a0, -a0])

        for _ in range(256):
            p = kick(p, accel(p), dt / 2.0)
            p = drift(p, dt)
            p = kick(p, accel(p), dt / 2.0)
        r_final = np.linalg.norm(p.pos[1] - p.pos[0])
        assert abs(r_final - d) / d < 1e-3


class TestSchedule:
    def test_equal_log_increments(self):
        edges = lna_schedule(0.1, 1.0, 8)
        ratios = edges[1:] / edges[:-1]
        assert np.allclose(ratios, ratios[0], rtol=1e-12)
        assert edges[0] == 0.1 and edges[-1] == 1.0

    def test_zero_steps(self):
        assert list(lna_schedule(0.4, 0.4, 0)) == [0.4]
