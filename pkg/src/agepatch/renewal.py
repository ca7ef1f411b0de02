"""Newborn renewal equation: quadrature operators and time marching.

The newborn vector rho(t) satisfies rho = K rho + F f, where K integrates
birth rates against cohorts born since t = 0 and F against cohorts already
present initially. Marching solves the discretized equation forward on the
lattice; the only implicit coupling is the age-0 trapezoid endpoint, which
is diagonal per patch and solved in closed form each step.

The corner characteristic a = t carries two one-sided limits when the
initial data is incompatible with the boundary value (f(0) != rho(0)):
the field stores the initial-data side, while the quadrature splits the
node between both sides so that rho(t_i) = (K rho)(t_i) + (F f)(t_i)
holds exactly at every grid time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .characteristics import RateTables, _Guard, _cohort_rhs, column_step
from .errors import StepFeasibilityError
from .scenario import AgeTimeGrid, ScenarioSpec

_trapz = getattr(np, "trapezoid", np.trapz)


@dataclass
class NewbornTrajectory:
    """Per-patch newborn time series rho_k(t) on the grid."""

    times: np.ndarray  # (I+1,)
    rho: np.ndarray  # (I+1, N)


@dataclass
class PopulationField:
    """Per-patch densities n_k(a, t) on the full lattice."""

    ages: np.ndarray  # (J+1,)
    times: np.ndarray  # (I+1,)
    values: np.ndarray  # (I+1, J+1, N)


@dataclass
class MarchResult:
    newborns: NewbornTrajectory
    field: Optional[PopulationField]
    min_pre_clamp: float


def _time_index(t: float, grid: AgeTimeGrid) -> int:
    i = round(t / grid.delta)
    if abs(t - i * grid.delta) > 1e-9 * max(1.0, abs(t)) or i < 0:
        raise ValueError(f"time {t} is not on the grid")
    return int(i)


def _initial_column(spec: ScenarioSpec, tables: RateTables) -> np.ndarray:
    ages = tables.grid.ages()
    return np.column_stack([p.sample(ages) for p in spec.initial])


def _rho_array(rho, n_patches: int) -> np.ndarray:
    if isinstance(rho, NewbornTrajectory):
        rho = rho.rho
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 1:
        rho = rho[:, None]
    if rho.ndim != 2 or rho.shape[1] != n_patches:
        raise ValueError("rho must have one column per patch")
    return rho


def _diag_step(tables: RateTables, value: np.ndarray, cell: int, t: float) -> np.ndarray:
    """One RK4 step of the corner characteristic through age cell `cell`."""
    d = tables.delta
    v = value[None, :]
    if tables.static and tables._col_cache is not None:
        (mu0, L0, D0), (muh, Lh, Dh), (mu1, L1, D1) = tables._col_cache
        args = (
            (mu0[cell : cell + 1], L0[cell : cell + 1], D0[cell : cell + 1]),
            (muh[cell : cell + 1], Lh[cell : cell + 1], Dh[cell : cell + 1]),
            (mu1[cell : cell + 1], L1[cell : cell + 1], D1[cell : cell + 1]),
        )
    else:
        args = (
            tables.phi_stage(cell, 0, np.array([t])),
            tables.phi_stage(cell, 1, np.array([t + 0.5 * d])),
            tables.phi_stage(cell, 2, np.array([t + d])),
        )
    k1 = _cohort_rhs(v, *args[0], False)
    k2 = _cohort_rhs(v + 0.5 * d * k1, *args[1], False)
    k3 = _cohort_rhs(v + 0.5 * d * k2, *args[1], False)
    k4 = _cohort_rhs(v + d * k3, *args[2], False)
    out = v + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return np.clip(out[0], 0.0, None)


def apply_K(rho, t: float, spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> np.ndarray:
    """Birth-weighted integral over cohorts born on [0, t].

    rho must be defined on the grid at least up to t; the result depends
    on rho only through its values on [0, t] (Volterra causality).
    """
    tables = RateTables(spec, grid)
    tables.cache_static_column()
    i = _time_index(t, tables.grid)
    rho = _rho_array(rho, spec.n_patches)
    if rho.shape[0] < i + 1:
        raise ValueError("rho must be defined on [0, t]")
    n_ages = tables.n_ages
    guard = _Guard(float(rho[: i + 1].max(initial=0.0)), "apply_K")
    u = np.zeros((n_ages + 1, spec.n_patches))
    u[0] = rho[0]
    for step in range(i):
        u[1:] = column_step(tables, u[:-1], step * tables.delta, guard)
        u[0] = rho[step + 1]
    hi = min(i, n_ages)
    if hi == 0:
        return np.zeros(spec.n_patches)
    integrand = tables.column_m(t)[: hi + 1] * u[: hi + 1]
    return _trapz(integrand, dx=tables.delta, axis=0)


def apply_F(f, t: float, spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> np.ndarray:
    """Birth-weighted integral over the surviving initial population.

    f may be None (use the scenario's initial profiles), a list of
    profiles, or a pre-sampled (J+1, N) array on the age lattice. Cohorts
    of initial age y are advanced t years so they contribute at age y + t;
    the result vanishes for t >= a_max.
    """
    tables = RateTables(spec, grid)
    tables.cache_static_column()
    i = _time_index(t, tables.grid)
    if f is None:
        u = _initial_column(spec, tables)
    elif isinstance(f, np.ndarray):
        u = np.array(f, dtype=float)
        if u.shape != (tables.n_ages + 1, spec.n_patches):
            raise ValueError("pre-sampled initial data must have shape (n_ages+1, n_patches)")
    else:
        ages = tables.grid.ages()
        u = np.column_stack([p.sample(ages) for p in f])
    if i >= tables.n_ages:
        return np.zeros(spec.n_patches)
    guard = _Guard(float(u.max(initial=0.0)), "apply_F")
    for step in range(i):
        u[1:] = column_step(tables, u[:-1], step * tables.delta, guard)
        u[0] = 0.0
    integrand = tables.column_m(t)[i:] * u[i:]
    return _trapz(integrand, dx=tables.delta, axis=0)


def march(spec: ScenarioSpec, grid: AgeTimeGrid | None = None, keep_field: bool = True) -> MarchResult:
    """Solve the renewal equation forward in time on the lattice.

    Requires a validated scenario. Raises StepFeasibilityError when the
    implicit age-0 endpoint is infeasible (delta * m(0, t) / 2 >= 1) and
    propagates IntegrationFailureError from cohort integration.
    """
    tables = RateTables(spec, grid)
    tables.cache_static_column()
    g = tables.grid
    n_ages, n_times, n = tables.n_ages, g.n_time_steps, spec.n_patches
    d = g.delta

    # implicit endpoint feasibility over the whole horizon
    m0_max = max(
        (tables.m_nodes[0, k] * spec.rates.m[k].modulation.max_value() for k in range(n)),
        default=0.0,
    )
    if 0.5 * d * m0_max >= 1.0:
        raise StepFeasibilityError(
            f"delta*m(0,t)/2 = {0.5 * d * m0_max:.3g} >= 1: refine delta or reduce newborn birth rate"
        )

    u = _initial_column(spec, tables)
    guard = _Guard(float(u.max(initial=0.0)), "march")
    rho = np.empty((n_times + 1, n))
    rho[0] = _trapz(tables.column_m(0.0) * u, dx=d, axis=0)
    field = None
    if keep_field:
        field = np.empty((n_times + 1, n_ages + 1, n))
        field[0] = u
        field[0, 0] = rho[0]

    # corner characteristic: newborn-side value, aged alongside the column
    corner = rho[0].copy()

    for i in range(n_times):
        t = i * d
        u[1:] = column_step(tables, u[:-1], t, guard)
        if i < n_ages:
            corner = _diag_step(tables, corner, i, t)
        m_col = tables.column_m(t + d)
        integrand = m_col * u
        integrand[0] = 0.0
        s = _trapz(integrand[: n_ages + 1], dx=d, axis=0)
        dnode = i + 1
        if dnode <= n_ages:
            s = s + 0.5 * d * m_col[dnode] * (corner - u[dnode])
        rho_new = s / (1.0 - 0.5 * d * m_col[0])
        u[0] = rho_new
        rho[i + 1] = rho_new
        if keep_field:
            field[i + 1] = u

    newborns = NewbornTrajectory(g.times(), rho)
    pop_field = None
    if keep_field:
        pop_field = PopulationField(g.ages(), g.times(), field)
    return MarchResult(newborns, pop_field, guard.min_pre_clamp)


def total_population(field: PopulationField) -> np.ndarray:
    """Per-patch totals N_k(t): trapezoid over ages at each grid time."""
    ages = np.asarray(field.ages)
    return _trapz(field.values, dx=float(ages[1] - ages[0]), axis=1)
