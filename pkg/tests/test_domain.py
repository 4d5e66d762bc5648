import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treegrid.domain import (CosmologyParams, DomainValidationError, Particle,
                             Particles, RunConfig, SlabDomain, StepTimings,
                             hubble0_internal, mass_unit_msun, slab_contains,
                             validate_domains, velocity_from_kms, velocity_kms,
                             wrap_position)


class TestParticle:
    def test_valid(self):
        p = Particle(7, (0.1, 0.2, 0.3), (0.0, 0.0, 0.0), 1.0)
        assert p.mass == 1.0

    def test_mass_must_be_positive(self):
        with pytest.raises(ValueError):
            Particle(1, (0.1, 0.2, 0.3), (0, 0, 0), 0.0)

    def test_position_must_be_wrapped(self):
        with pytest.raises(ValueError):
            Particle(1, (1.0, 0.2, 0.3), (0, 0, 0), 1.0)


class TestParticles:
    def test_shapes_checked(self):
        with pytest.raises(ValueError):
            Particles(np.arange(3, dtype=np.uint64), np.zeros((2, 3)),
                      np.zeros((3, 3)), np.ones(3))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            Particles(np.array([1, 1], dtype=np.uint64), np.full((2, 3), 0.5),
                      np.zeros((2, 3)), np.ones(2))

    def test_concat_and_select(self):
        a = Particles(np.array([0], dtype=np.uint64), np.full((1, 3), 0.25),
                      np.zeros((1, 3)), np.ones(1))
        b = Particles(np.array([1], dtype=np.uint64), np.full((1, 3), 0.75),
                      np.zeros((1, 3)), np.ones(1))
        both = Particles.concat([a, b])
        assert len(both) == 2
        assert len(both.select(both.pos[:, 0] < 0.5)) == 1


class TestCosmologyParams:
    def test_production_defaults(self):
        c = CosmologyParams()
        assert c.omega0 == 0.3
        assert c.lambda0 == 0.7
        assert c.h0 == 70.0
        assert c.sigma8 == 0.8
        assert c.box_mpc == 30.0
        # 175 pc softening as a fraction of the 30 Mpc box
        assert c.softening_box == pytest.approx(0.000175 / 30.0, rel=1e-12)

    def test_flatness_enforced(self):
        with pytest.raises(ValueError):
            CosmologyParams(omega0=0.3, lambda0=0.6)

    def test_a_initial_range(self):
        with pytest.raises(ValueError):
            CosmologyParams(a_initial=1.5)

    def test_internal_hubble_constant(self):
        c = CosmologyParams()
        assert hubble0_internal(c) == pytest.approx(
            math.sqrt(8.0 * math.pi / (3.0 * 0.3)), rel=1e-14)


class TestRunConfig:
    def test_defaults_carry_production_values(self):
        cfg = RunConfig()
        assert cfg.sampling_rate == 20000
        assert cfg.boundary_move_limit == 1e-5
        assert cfg.theta == 0.5

    def test_split_defaults_follow_mesh(self):
        cfg = RunConfig(mesh_size=64)
        assert cfg.r_split == pytest.approx(3.5 / 64)
        assert cfg.r_cut == pytest.approx(4.5 * cfg.r_split)

    def test_truncation_bound(self):
        with pytest.raises(ValueError):
            RunConfig(r_split=0.05, r_cut=0.1)

    def test_mesh_power_of_two(self):
        with pytest.raises(ValueError):
            RunConfig(mesh_size=48)

    def test_move_limit_range(self):
        with pytest.raises(ValueError):
            RunConfig(boundary_move_limit=1.5)


class TestValidateDomains:
    def test_exact_halves_ok(self):
        doms = [SlabDomain(0, 0.0, 0.5), SlabDomain(1, 0.5, 1.0)]
        assert validate_domains(doms)[0].site_id == 0

    def test_gap_reported_with_site_and_boundary(self):
        doms = [SlabDomain(0, 0.0, 0.4), SlabDomain(1, 0.5, 1.0)]
        with pytest.raises(DomainValidationError) as ei:
            validate_domains(doms)
        assert "0.4" in str(ei.value)
        assert "site" in str(ei.value)

    def test_three_equal_thirds_ok(self):
        doms = [SlabDomain(i, i / 3, (i + 1) / 3) for i in range(2)]
        doms.append(SlabDomain(2, 2 / 3, 1.0))
        validate_domains(doms)

    def test_overlap_rejected(self):
        doms = [SlabDomain(0, 0.0, 0.6), SlabDomain(1, 0.5, 1.0)]
        with pytest.raises(DomainValidationError):
            validate_domains(doms)

    def test_empty_rejected(self):
        with pytest.raises(DomainValidationError):
            validate_domains([])

    def test_must_cover_unit_interval(self):
        with pytest.raises(DomainValidationError):
            validate_domains([SlabDomain(0, 0.0, 0.9)])

    def test_axis_restricted(self):
        with pytest.raises(ValueError):
            SlabDomain(0, 0.0, 1.0, axis="y")


class TestWrapPosition:
    def test_identity_inside(self):
        assert np.allclose(wrap_position((0.5, 0.5, 0.5)), (0.5, 0.5, 0.5))

    def test_modular(self):
        assert np.allclose(wrap_position((1.25, -0.25, 0.0)), (0.25, 0.75, 0.0))

    def test_upper_boundary_maps_to_zero(self):
        assert np.all(wrap_position((1.0, 1.0, 1.0)) == 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            wrap_position((np.inf, 0.0, 0.0))

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6,
                              allow_nan=False, allow_infinity=False),
                    min_size=3, max_size=3))
    def test_idempotent_and_in_range(self, xs):
        w = wrap_position(xs)
        assert np.all((w >= 0.0) & (w < 1.0))
        assert np.array_equal(wrap_position(w), w)


class TestSlabContains:
    def test_lo_inclusive_hi_exclusive(self):
        d = SlabDomain(0, 0.25, 0.5)
        x = np.array([0.25, 0.5, 0.49999999])
        assert list(slab_contains(d, x)) == [True, False, True]


class TestStepTimings:
    def test_total_must_cover_calc(self):
        row = StepTimings(step=0, z=1.0, calc_s=2.0, total_s=1.0)
        with pytest.raises(ValueError):
            row.validate()

    def test_csv_row_full_precision(self):
        row = StepTimings(step=3, z=0.1234567890123456, calc_s=1.0,
                          total_s=2.0, interactions=42)
        text = row.csv_row()
        assert text.split(",")[1] == repr(0.1234567890123456)


class TestUnitConversions:
    def test_total_mass_scale(self):
        c = CosmologyParams()
        # Omega0 * rho_crit(h) * box^3
        h = 0.7
        expect = 0.3 * 2.77536627e11 * h * h * 30.0**3
        assert mass_unit_msun(c) == pytest.approx(expect, rel=1e-12)

    def test_velocity_round_trip(self):
        c = CosmologyParams()
        v = np.array([[120.0, -35.5, 2.25]])
        a = 0.73
        p = velocity_from_kms(v, a, c)
        back = velocity_kms(p, a, c)
        assert np.all(np.abs(back - v) <= 1e-12 * np.abs(v))
