"""Renewal operators and time marching."""

import numpy as np
import pytest

from agepatch import (
    StepFeasibilityError,
    apply_F,
    apply_K,
    apply_Kbar,
    march,
    solve_rho_star,
    total_population,
)
from agepatch.renewal import PopulationField
from agepatch.scenario import AgeTimeGrid, ConstantProfile, WindowProfile

from conftest import make_spec, one_patch_spec, random_constant_spec, scalar_rho_star

_trapz = getattr(np, "trapezoid", np.trapz)

FAST = AgeTimeGrid(0.05, 40.0, 20.0)


class TestApplyK:
    def test_zero_time_gives_zero(self):
        spec = one_patch_spec(grid=FAST)
        rho = np.ones((FAST.n_time_steps + 1, 1))
        assert np.array_equal(apply_K(rho, 0.0, spec), np.zeros(1))

    def test_empty_birth_support_gives_zero(self):
        spec = one_patch_spec(m=WindowProfile(1.0, 2.0, 3.0), grid=FAST)
        spec = make_spec([0.5], [spec.rates.m[0]], [100.0], [WindowProfile(1.0, 0.0, 10.0)], FAST)
        rho = np.ones((FAST.n_time_steps + 1, 1))
        assert np.allclose(apply_K(rho, 1.0, spec), 0.0)

    def test_constant_rho_beyond_a_max_matches_kbar(self):
        grid = AgeTimeGrid(0.05, 10.0, 15.0)
        spec = one_patch_spec(m=WindowProfile(1.5, 1.0, 8.0), grid=grid)
        rho_const = np.full((grid.n_time_steps + 1, 1), 3.0)
        via_k = apply_K(rho_const, 12.0, spec)
        via_kbar = apply_Kbar(np.array([3.0]), spec)
        assert np.max(np.abs(via_k - via_kbar)) < 1e-10

    def test_volterra_causality(self):
        spec = one_patch_spec(grid=FAST)
        rng = np.random.default_rng(1)
        rho = rng.uniform(1.0, 2.0, size=(FAST.n_time_steps + 1, 1))
        t = 5.0
        base = apply_K(rho, t, spec)
        i = round(t / FAST.delta)
        tampered = rho.copy()
        tampered[i + 1 :] += 100.0
        assert np.array_equal(apply_K(tampered, t, spec), base)

    def test_off_grid_time_rejected(self):
        spec = one_patch_spec(grid=FAST)
        rho = np.ones((FAST.n_time_steps + 1, 1))
        with pytest.raises(ValueError):
            apply_K(rho, 5.013, spec)
        with pytest.raises(ValueError):
            apply_F(None, 5.013, spec)


class TestApplyF:
    def test_zero_initial_gives_zero(self):
        spec = one_patch_spec(f=WindowProfile(0.0, 0.0, 1.0), grid=FAST)
        assert np.allclose(apply_F(None, 5.0, spec), 0.0)

    def test_beyond_a_max_gives_zero(self):
        grid = AgeTimeGrid(0.1, 10.0, 20.0)
        spec = one_patch_spec(grid=grid)
        assert np.array_equal(apply_F(None, 10.0, spec), np.zeros(1))
        assert np.array_equal(apply_F(None, 12.0, spec), np.zeros(1))

    def test_linear_decay_analytic(self):
        # m = 1 on [0, 40], negligible density term, constant initial profile
        spec = one_patch_spec(mu=0.5, m=1.0, L=1e12, f=ConstantProfile(2.0),
                              grid=AgeTimeGrid(0.02, 40.0, 40.0))
        for t in (1.0, 10.0, 25.0):
            expected = 2.0 * np.exp(-0.5 * t) * (40.0 - t)
            got = apply_F(None, t, spec)[0]
            assert got == pytest.approx(expected, rel=1e-4)


class TestMarch:
    def test_zero_initial_stays_zero(self):
        spec = one_patch_spec(f=WindowProfile(0.0, 0.0, 1.0), grid=FAST)
        result = march(spec)
        assert np.all(result.newborns.rho == 0.0)
        assert np.all(result.field.values == 0.0)

    def test_discrete_renewal_identity_exact(self):
        spec = one_patch_spec(grid=FAST)
        result = march(spec, keep_field=False)
        for t in (0.0, 0.05, 1.0, 7.35, 20.0):
            i = round(t / FAST.delta)
            lhs = result.newborns.rho[i]
            rhs = apply_K(result.newborns, t, spec) + apply_F(None, t, spec)
            assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(lhs)))

    def test_subcritical_decay(self):
        spec = one_patch_spec(mu=1.0, m=0.5, L=100.0, grid=AgeTimeGrid(0.05, 40.0, 80.0))
        result = march(spec, keep_field=False)
        peak = np.max(np.abs(result.newborns.rho))
        assert np.abs(result.newborns.rho[-1, 0]) <= 1e-3 * peak

    def test_supercritical_approaches_rho_star(self):
        spec = one_patch_spec(mu=0.5, m=1.0, L=100.0, grid=AgeTimeGrid(0.05, 40.0, 60.0))
        result = march(spec, keep_field=False)
        fp = solve_rho_star(spec)
        assert result.newborns.rho[-1, 0] == pytest.approx(fp.rho_star[0], rel=0.01)
        # scalar root oracle, continuum value
        assert result.newborns.rho[-1, 0] == pytest.approx(scalar_rho_star(0.5, 1.0, 100.0), rel=0.01)

    def test_boundary_condition_field_consistency(self):
        # Corner-compatible data (rho(0) = f(0)) keeps the discrete birth law
        # exact at every grid time, including t = 0.
        grid = AgeTimeGrid(0.05, 40.0, 10.0)
        spec = one_patch_spec(mu=0.5, m=1.0 / 40.0, L=100.0, f=ConstantProfile(2.0), grid=grid)
        result = march(spec)
        m_col = spec.rates.m[0].profile.sample(grid.ages())[:, None]
        for i in range(grid.n_time_steps + 1):
            quad = _trapz(m_col * result.field.values[i], dx=grid.delta, axis=0)
            assert np.max(np.abs(quad - result.newborns.rho[i])) <= 1e-12 * max(1.0, result.newborns.rho[i, 0])

    def test_boundary_consistency_generic_tail(self):
        # With incompatible corner data the jump decays along a = t; from a few
        # years in, the reconstructed field satisfies the birth law within 10 delta^2.
        rng = np.random.default_rng(23)
        spec = random_constant_spec(rng, n_patches=2)
        grid = spec.grid
        result = march(spec)
        ages = grid.ages()
        m_cols = np.column_stack([r.profile.sample(ages) for r in spec.rates.m])
        tol = 10.0 * grid.delta**2
        for i in range(round(5.0 / grid.delta), grid.n_time_steps + 1):
            quad = _trapz(m_cols * result.field.values[i], dx=grid.delta, axis=0)
            scale = max(np.max(np.abs(result.newborns.rho[i])), 1e-12)
            assert np.max(np.abs(quad - result.newborns.rho[i])) <= tol * scale

    def test_field_matches_initial_and_boundary(self):
        spec = one_patch_spec(grid=FAST)
        result = march(spec)
        ages = FAST.ages()
        f0 = spec.initial[0].sample(ages)
        assert np.array_equal(result.field.values[0, 1:, 0], f0[1:])
        assert np.array_equal(result.field.values[:, 0, 0], result.newborns.rho[:, 0])

    def test_positivity_with_positive_initial_data(self):
        spec = make_spec([0.5, 0.7], [1.0, 0.8], [100.0, 100.0],
                         [WindowProfile(1.0, 0.0, 10.0), WindowProfile(2.0, 0.0, 10.0)],
                         FAST)
        result = march(spec, keep_field=False)
        assert np.all(result.newborns.rho[1:] > 0.0)
        assert result.min_pre_clamp >= -1e-12

    def test_monotone_in_initial_data(self):
        rng = np.random.default_rng(9)
        spec1 = random_constant_spec(rng, n_patches=2)
        f2 = tuple(WindowProfile(p.value * 1.7, p.a_lo, p.a_hi) for p in spec1.initial)
        spec2 = make_spec(list(spec1.rates.mu), list(spec1.rates.m), list(spec1.rates.L),
                          list(f2), spec1.grid, spec1.dispersion)
        r1 = march(spec1, keep_field=False).newborns.rho
        r2 = march(spec2, keep_field=False).newborns.rho
        assert np.all(r1 <= r2 + 1e-10)

    def test_second_order_grid_convergence(self):
        values = []
        for delta in (0.2, 0.1, 0.05):
            grid = AgeTimeGrid(delta, 20.0, 10.0)
            spec = one_patch_spec(mu=0.5, m=1.0, L=100.0, f=WindowProfile(5.0, 0.0, 10.0), grid=grid)
            values.append(march(spec, grid=grid, keep_field=False).newborns.rho[-1, 0])
        d1 = abs(values[0] - values[1])
        d2 = abs(values[1] - values[2])
        assert 2.5 < d1 / d2 < 6.0

    def test_step_feasibility_guard(self):
        spec = one_patch_spec(m=100.0, grid=AgeTimeGrid(0.05, 10.0, 5.0))
        with pytest.raises(StepFeasibilityError):
            march(spec)


class TestTotalPopulation:
    def test_zero_field(self):
        field = PopulationField(np.arange(3) * 1.0, np.arange(2) * 1.0, np.zeros((2, 3, 1)))
        assert np.all(total_population(field) == 0.0)

    def test_constant_field(self):
        field = PopulationField(np.linspace(0.0, 40.0, 81), np.arange(2) * 1.0,
                                np.full((2, 81, 1), 3.0))
        assert np.allclose(total_population(field), 3.0 * 40.0)

    def test_equilibrium_total_matches_analytic(self):
        # m = 1 makes the equilibrium total equal rho*; analytic (L/mu) ln(1 + x)
        spec = one_patch_spec(mu=0.5, m=1.0, L=100.0, grid=AgeTimeGrid(0.05, 40.0, 60.0))
        result = march(spec)
        totals = total_population(result.field)
        rho_star = scalar_rho_star(0.5, 1.0, 100.0)
        analytic = (100.0 / 0.5) * np.log1p(rho_star / 100.0)
        assert totals[-1, 0] == pytest.approx(analytic, rel=0.01)
        assert np.all(totals >= 0.0)
