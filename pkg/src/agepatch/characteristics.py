"""Cohort integration along characteristics.

On the shared lattice every characteristic a - t = const passes through
grid nodes, so a cohort is advanced with classical fixed-step 4th-order
Runge-Kutta, one step per grid cell. Two start conventions exist:

  phi: a cohort of newborns entering at time y; at parameter x it has
       age x and lives at time x + y.
  psi: a cohort present initially with age y; at parameter x it has
       age x + y and lives at time x.

The cohort system couples patches through dispersal at equal age and
time, so each characteristic evolves independently of all others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrationFailureError
from .scenario import AgeTimeGrid, NoModulation, ScenarioSpec

CLAMP_TOL = 1e-12
BLOWUP_FACTOR = 1e6

_trapz = getattr(np, "trapezoid", np.trapz)


def _mod_values(mods, t):
    """Sample each modulation at t; scalar t -> (N,), vector t -> (B, N)."""
    cols = [np.asarray(mod.sample(t), dtype=float) for mod in mods]
    if np.ndim(t) == 0:
        return np.array([float(c) for c in cols])
    return np.column_stack(cols)


class RateTables:
    """Per-scenario cache of profile samples on the age lattice.

    Profiles are sampled once at the lattice nodes and cell midpoints;
    Runge-Kutta stages then only scale them by time-modulation factors.
    In a constant environment the per-stage coefficient arrays for the
    whole-column step are additionally cached outright.
    """

    def __init__(self, spec: ScenarioSpec, grid: AgeTimeGrid | None = None):
        self.spec = spec
        self.grid = grid if grid is not None else spec.grid
        self.delta = self.grid.delta
        self.n = spec.n_patches
        self.n_ages = self.grid.n_age_steps
        ages = self.grid.ages()
        mids = ages[:-1] + 0.5 * self.delta

        def nodes_mids(profiles):
            nodes = np.column_stack([p.sample(ages) for p in profiles])
            mid = np.column_stack([p.sample(mids) for p in profiles])
            return nodes, mid

        self.mu_nodes, self.mu_mids = nodes_mids([r.profile for r in spec.rates.mu])
        self.m_nodes, self.m_mids = nodes_mids([r.profile for r in spec.rates.m])
        self.L_nodes, self.L_mids = nodes_mids([r.profile for r in spec.rates.L])
        self.mods_mu = [r.modulation for r in spec.rates.mu]
        self.mods_m = [r.modulation for r in spec.rates.m]
        self.mods_L = [r.modulation for r in spec.rates.L]

        self.offdiag = [
            (k, j, rate.profile.sample(ages), rate.profile.sample(mids), rate.modulation)
            for (k, j), rate in sorted(spec.dispersion.offdiag.items())
        ]
        self.diagonal = [
            (k, rate.profile.sample(ages), rate.profile.sample(mids), rate.modulation)
            for k, rate in sorted(spec.dispersion.diagonal.items())
        ]
        self.mass_conserving = spec.dispersion.diagonal_mode == "mass_conserving"

        mods = self.mods_mu + self.mods_m + self.mods_L
        mods += [entry[4] for entry in self.offdiag] + [entry[3] for entry in self.diagonal]
        self.static = all(isinstance(mod, NoModulation) for mod in mods)
        self._col_cache = None
        self._phi_cache = None
        self._gen_cache = None

    # -- dispersal assembly -------------------------------------------------

    def _dispersal(self, shape, prof_pick, mod_times):
        """Assemble D with rows/batches given by `shape` (J or B, N, N)."""
        D = np.zeros(shape)
        for k, j, prof_nodes, prof_mids, mod in self.offdiag:
            D[..., k, j] = prof_pick(prof_nodes, prof_mids) * mod.sample(mod_times)
        if self.mass_conserving:
            col_sums = D.sum(axis=-2)
            for k in range(self.n):
                D[..., k, k] = -col_sums[..., k]
        else:
            for k, prof_nodes, prof_mids, mod in self.diagonal:
                D[..., k, k] = -prof_pick(prof_nodes, prof_mids) * mod.sample(mod_times)
        return D

    # -- whole-column stages (shared time, ages = lattice rows) -------------

    def column_stage(self, stage: int, t: float):
        """Coefficients for all cells of the age column at one RK stage.

        stage 0: cell left nodes, 1: cell midpoints, 2: cell right nodes.
        Returns mu, L of shape (J, N) and D of shape (J, N, N).
        """
        if self.static and self._col_cache is not None:
            return self._col_cache[stage]

        def pick(nodes, mids):
            if stage == 0:
                return nodes[:-1]
            if stage == 1:
                return mids
            return nodes[1:]

        mod_mu = _mod_values(self.mods_mu, t)
        mod_L = _mod_values(self.mods_L, t)
        mu = pick(self.mu_nodes, self.mu_mids) * mod_mu
        L = pick(self.L_nodes, self.L_mids) * mod_L
        D = self._dispersal((self.n_ages, self.n, self.n), pick, t)
        return mu, L, D

    def cache_static_column(self):
        if self.static and self._col_cache is None:
            self._col_cache = tuple(self.column_stage(s, 0.0) for s in range(3))

    def cache_static_phi(self):
        """Time-independent per-cell stage coefficients (constant environment).

        Entries are (mu (N,), L (N,), D (N, N)) per stage; they broadcast
        against any batch of cohorts.
        """
        if not self.static or self._phi_cache is not None:
            return
        zero = np.array([0.0])
        cache = []
        for j in range(self.n_ages):
            stages = []
            for s in range(3):
                mu, L, D = self.phi_stage(j, s, zero)
                stages.append((mu[0], L[0], D[0]))
            cache.append(tuple(stages))
        self._phi_cache = cache

    def cache_static_generators(self):
        """Time-independent -diag(mu) + D per cell and stage (constant env)."""
        if not self.static or self._gen_cache is not None:
            return
        zero = np.array([0.0])
        self._gen_cache = [
            tuple(self.linear_generator(j, s, zero)[0] for s in range(3)) for j in range(self.n_ages)
        ]

    def column_m(self, t: float):
        """Birth rates at every lattice node at time t, shape (J+1, N)."""
        return self.m_nodes * _mod_values(self.mods_m, t)

    # -- phase stages (shared lattice age, per-cohort times) ----------------

    def _phi_row(self, nodes, mids, j, stage):
        if stage == 0:
            return nodes[j]
        if stage == 1:
            return mids[j]
        return nodes[j + 1]

    def phi_stage(self, j: int, stage: int, times):
        """Coefficients at lattice age cell j for cohorts at `times` (B,)."""
        mu = self._phi_row(self.mu_nodes, self.mu_mids, j, stage) * _mod_values(self.mods_mu, times)
        L = self._phi_row(self.L_nodes, self.L_mids, j, stage) * _mod_values(self.mods_L, times)
        B = len(np.atleast_1d(times))
        D = self._dispersal((B, self.n, self.n), lambda n_, m_: self._phi_row(n_, m_, j, stage), times)
        return mu, L, D

    def linear_generator(self, j: int, stage: int, times):
        """-diag(mu) + D at lattice age cell j for cohorts at `times` (B,)."""
        mu = self._phi_row(self.mu_nodes, self.mu_mids, j, stage) * _mod_values(self.mods_mu, times)
        B = len(np.atleast_1d(times))
        A = self._dispersal((B, self.n, self.n), lambda n_, m_: self._phi_row(n_, m_, j, stage), times)
        for k in range(self.n):
            A[:, k, k] -= mu[:, k]
        return A

    def m_phi(self, j: int, times):
        """Birth rates at lattice node j for cohorts at `times` (B,), shape (B, N)."""
        return self.m_nodes[j] * _mod_values(self.mods_m, times)

    # -- pointwise (arbitrary ages, scalar time) -----------------------------

    def pointwise(self, ages, t: float):
        """mu, L (B, N) and D (B, N, N) at arbitrary ages and one time."""
        ages = np.atleast_1d(np.asarray(ages, dtype=float))
        mu = np.column_stack([r.profile.sample(ages) for r in self.spec.rates.mu]) * _mod_values(self.mods_mu, t)
        L = np.column_stack([r.profile.sample(ages) for r in self.spec.rates.L]) * _mod_values(self.mods_L, t)
        D = np.zeros((ages.size, self.n, self.n))
        for (k, j), rate in sorted(self.spec.dispersion.offdiag.items()):
            D[:, k, j] = rate.profile.sample(ages) * rate.modulation.sample(t)
        if self.mass_conserving:
            col_sums = D.sum(axis=-2)
            for k in range(self.n):
                D[:, k, k] = -col_sums[:, k]
        else:
            for k, rate in sorted(self.spec.dispersion.diagonal.items()):
                D[:, k, k] = -rate.profile.sample(ages) * rate.modulation.sample(t)
        return mu, L, D


# ---------------------------------------------------------------------------
# Runge-Kutta kernels


def _cohort_rhs(v, mu, L, D, linear: bool):
    w = v if linear else v + v * v / L
    if D.ndim == 2:
        return -mu * w + v @ D.T
    return -mu * w + np.einsum("bkl,bl->bk", D, v)


class _Guard:
    """Tracks the pre-clamp minimum and enforces the blow-up/negativity policy."""

    def __init__(self, start_scale: float, context: str):
        self.cap = BLOWUP_FACTOR * max(1.0, start_scale)
        self.context = context
        self.min_pre_clamp = np.inf

    def apply(self, v, x):
        mn = float(v.min())
        self.min_pre_clamp = min(self.min_pre_clamp, mn)
        if mn < 0.0:
            if mn < -CLAMP_TOL:
                raise IntegrationFailureError(
                    f"{self.context}: value {mn:.3e} below -{CLAMP_TOL:g} at x={x:g}"
                )
            np.clip(v, 0.0, None, out=v)
        if float(v.max()) > self.cap:
            raise IntegrationFailureError(
                f"{self.context}: value {float(v.max()):.3e} exceeds {self.cap:.3e} at x={x:g} (step instability)"
            )
        return v


def phi_batch(tables: RateTables, starts, ys, n_steps: int, linear: bool = False):
    """Advance newborn cohorts with time offsets `ys` over n_steps cells.

    starts: (B, N) nonnegative; returns values (n_steps+1, B, N).
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    if n_steps > tables.n_ages:
        raise ValueError("phi cohorts cannot be integrated beyond a_max")
    d = tables.delta
    tables.cache_static_phi()
    cache = tables._phi_cache
    guard = _Guard(float(starts.max(initial=0.0)), "phi cohort")
    out = np.empty((n_steps + 1,) + starts.shape)
    v = starts.copy()
    out[0] = v
    for j in range(n_steps):
        x = j * d
        if cache is not None:
            (mu0, L0, D0), (muh, Lh, Dh), (mu1, L1, D1) = cache[j]
        else:
            mu0, L0, D0 = tables.phi_stage(j, 0, ys + x)
            muh, Lh, Dh = tables.phi_stage(j, 1, ys + x + 0.5 * d)
            mu1, L1, D1 = tables.phi_stage(j, 2, ys + x + d)
        k1 = _cohort_rhs(v, mu0, L0, D0, linear)
        k2 = _cohort_rhs(v + 0.5 * d * k1, muh, Lh, Dh, linear)
        k3 = _cohort_rhs(v + 0.5 * d * k2, muh, Lh, Dh, linear)
        k4 = _cohort_rhs(v + d * k3, mu1, L1, D1, linear)
        v = v + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[j + 1] = guard.apply(v, x + d)
    return out, guard.min_pre_clamp


def psi_single(tables: RateTables, start, y: float, n_steps: int, linear: bool = False):
    """Advance one initial-data cohort of starting age y over n_steps cells."""
    start = np.atleast_2d(np.asarray(start, dtype=float))
    d = tables.delta
    if y < -1e-12 or y + n_steps * d > tables.grid.a_max + 1e-9:
        raise ValueError("psi cohort ages must stay within [0, a_max]")
    guard = _Guard(float(start.max(initial=0.0)), "psi cohort")
    out = np.empty((n_steps + 1,) + start.shape)
    v = start.copy()
    out[0] = v
    for j in range(n_steps):
        x = j * d
        mu0, L0, D0 = tables.pointwise(y + x, x)
        muh, Lh, Dh = tables.pointwise(y + x + 0.5 * d, x + 0.5 * d)
        mu1, L1, D1 = tables.pointwise(y + x + d, x + d)
        k1 = _cohort_rhs(v, mu0, L0, D0, linear)
        k2 = _cohort_rhs(v + 0.5 * d * k1, muh, Lh, Dh, linear)
        k3 = _cohort_rhs(v + 0.5 * d * k2, muh, Lh, Dh, linear)
        k4 = _cohort_rhs(v + d * k3, mu1, L1, D1, linear)
        v = v + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[j + 1] = guard.apply(v, x + d)
    return out, guard.min_pre_clamp


def column_step(tables: RateTables, v, t: float, guard: _Guard):
    """Advance the whole age column from time t to t + delta.

    v holds cohort values at ages[0:J] and time t; the result holds the
    same cohorts at ages[1:J+1] and time t + delta (everyone one cell
    older; the oldest cell has left through a_max).
    """
    d = tables.delta
    mu0, L0, D0 = tables.column_stage(0, t)
    muh, Lh, Dh = tables.column_stage(1, t + 0.5 * d)
    mu1, L1, D1 = tables.column_stage(2, t + d)
    k1 = _cohort_rhs(v, mu0, L0, D0, False)
    k2 = _cohort_rhs(v + 0.5 * d * k1, muh, Lh, Dh, False)
    k3 = _cohort_rhs(v + 0.5 * d * k2, muh, Lh, Dh, False)
    k4 = _cohort_rhs(v + d * k3, mu1, L1, D1, False)
    out = v + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return guard.apply(out, t + d)


def propagator_scan(tables: RateTables, ys, n_steps: int, on_node):
    """Integrate fundamental matrices E' = (-diag(mu) + D)E, E(0) = I.

    One matrix per time offset in `ys`; on_node(j, E) is called at every
    lattice node with E of shape (B, N, N).
    """
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    if n_steps > tables.n_ages:
        raise ValueError("propagators cannot be integrated beyond a_max")
    d = tables.delta
    n = tables.n
    tables.cache_static_generators()
    cache = tables._gen_cache
    guard = _Guard(1.0, "fundamental matrix")
    E = np.broadcast_to(np.eye(n), (ys.size, n, n)).copy()
    on_node(0, E)
    for j in range(n_steps):
        x = j * d
        if cache is not None:
            A0, Ah, A1 = cache[j]
        else:
            A0 = tables.linear_generator(j, 0, ys + x)
            Ah = tables.linear_generator(j, 1, ys + x + 0.5 * d)
            A1 = tables.linear_generator(j, 2, ys + x + d)
        k1 = A0 @ E
        k2 = Ah @ (E + 0.5 * d * k1)
        k3 = Ah @ (E + 0.5 * d * k2)
        k4 = A1 @ (E + d * k3)
        E = E + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        E = guard.apply(E, x + d)
        on_node(j + 1, E)
    return guard.min_pre_clamp


# ---------------------------------------------------------------------------
# Public operations


@dataclass
class CohortTrajectory:
    """One cohort's values along its characteristic."""

    x_values: np.ndarray
    values: np.ndarray  # (n_steps + 1, N)
    start_kind: str  # "phi" or "psi"
    offset: float  # y
    min_pre_clamp: float


@dataclass
class MatrixTrajectory:
    """Fundamental (propagator) matrices along a characteristic."""

    x_values: np.ndarray
    matrices: np.ndarray  # (n_steps + 1, N, N)
    offset: float
    min_pre_clamp: float


def _steps(x_max: float, grid: AgeTimeGrid) -> int:
    n = round(x_max / grid.delta)
    if n < 0 or abs(x_max - n * grid.delta) > 1e-9 * max(1.0, x_max):
        raise ValueError("x_max must be a nonnegative multiple of grid.delta")
    return int(n)


def solve_phi(start, y: float, x_max: float, spec: ScenarioSpec, grid: AgeTimeGrid | None = None,
              linear: bool = False) -> CohortTrajectory:
    """Cohort of newborns `start` entering at time y, followed for x_max years.

    Coefficients are evaluated at age x and time x + y, so the cohort has
    age a at time a + y. Values stay nonnegative (tiny negative round-off
    is clamped); instability raises IntegrationFailureError.
    """
    tables = RateTables(spec, grid)
    start = np.asarray(start, dtype=float)
    if start.shape != (spec.n_patches,):
        raise ValueError("start must be an N-vector")
    if np.any(start < 0):
        raise ValueError("start must be nonnegative")
    n = _steps(x_max, tables.grid)
    values, min_pre = phi_batch(tables, start[None, :], np.array([y]), n, linear=linear)
    return CohortTrajectory(np.arange(n + 1) * tables.delta, values[:, 0, :], "phi", y, min_pre)


def solve_psi(start, y: float, x_max: float, spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> CohortTrajectory:
    """Cohort of initial age y followed for x_max years of clock time.

    Coefficients are evaluated at age x + y and time x (the cohort has age
    x + y at time x). The dispersal term enters with a plus sign, exactly
    as in the balance law restricted to the characteristic.
    """
    tables = RateTables(spec, grid)
    start = np.asarray(start, dtype=float)
    if start.shape != (spec.n_patches,):
        raise ValueError("start must be an N-vector")
    if np.any(start < 0):
        raise ValueError("start must be nonnegative")
    n = _steps(x_max, tables.grid)
    values, min_pre = psi_single(tables, start[None, :], y, n)
    return CohortTrajectory(np.arange(n + 1) * tables.delta, values[:, 0, :], "psi", y, min_pre)


def fundamental_matrix(y: float, x_max: float, spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> MatrixTrajectory:
    """Propagator E(x) of the linearized system, E(0) = I.

    Column j equals the linearized newborn cohort started from the j-th
    basis vector at time offset y.
    """
    tables = RateTables(spec, grid)
    n = _steps(x_max, tables.grid)
    matrices = np.empty((n + 1, tables.n, tables.n))

    def record(j, E):
        matrices[j] = E[0]

    min_pre = propagator_scan(tables, np.array([y]), n, record)
    return MatrixTrajectory(np.arange(n + 1) * tables.delta, matrices, y, min_pre)
