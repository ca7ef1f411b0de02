"""Net reproductive operators, their spectral radii, and fixed points.

The constant-environment operator maps a constant newborn vector to its
lifetime offspring vector (an N x N nonnegative matrix); the periodic
operator acts on per-phase newborn vectors (an (N*M) x (N*M) matrix,
M phases per period). Spectral radii come from power iteration; the
nontrivial equilibria come from two-sided monotone iteration of the
nonlinear birth map, bracketed along the Perron direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .characteristics import RateTables, phi_batch, propagator_scan
from .errors import BracketFailureError, PowerIterationError
from .renewal import NewbornTrajectory
from .scenario import AgeTimeGrid, ScenarioSpec

_trapz = getattr(np, "trapezoid", np.trapz)

RAYLEIGH_TOL = 1e-10
MAX_POWER_ITERATIONS = 10_000
FIXED_POINT_RTOL = 1e-8
FIXED_POINT_ATOL = 1e-12
LOWER_SEED = 1e-6
MAX_FIXED_POINT_ITERATIONS = 20_000


@dataclass
class ReproductiveOperator:
    """Discretized net reproductive operator with its dominant pair."""

    kind: str  # "constant" or "periodic"
    matrix: np.ndarray
    sigma: float
    perron: np.ndarray  # (N,) for constant, (M, N) per phase for periodic
    n_phases: int = 1


@dataclass
class FixedPoint:
    """Stationary or periodic equilibrium of the newborn map."""

    kind: str  # "stationary" or "periodic"
    rho_star: Optional[np.ndarray]  # (N,) for stationary
    trajectory: Optional[NewbornTrajectory]  # one period, for periodic
    converged: bool
    iterations: int


def power_iteration(matrix) -> tuple:
    """Dominant eigenvalue and max-normalized positive eigenvector.

    Starts from all-ones and stops when successive Rayleigh quotients
    differ by less than 1e-10. A zero image yields sigma = 0; hitting the
    iteration cap raises PowerIterationError (reducible or degenerate
    matrix).
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if A.min() < 0:
        raise ValueError("matrix must be nonnegative")
    x = np.ones(A.shape[0])
    sigma_prev = None
    for _ in range(MAX_POWER_ITERATIONS):
        y = A @ x
        peak = y.max()
        if peak <= 0.0:
            return 0.0, x / x.max()
        sigma = float(x @ y) / float(x @ x)
        x = y / peak
        if sigma_prev is not None and abs(sigma - sigma_prev) < RAYLEIGH_TOL:
            return sigma, x / x.max()
        sigma_prev = sigma
    raise PowerIterationError(
        f"no convergence after {MAX_POWER_ITERATIONS} iterations (last Rayleigh ratio {sigma_prev})"
    )


def _require_environment(spec: ScenarioSpec, wanted: str, what: str):
    if spec.environment != wanted:
        raise ValueError(f"{what} requires a {wanted} environment, got '{spec.environment}'")


def _age_weights(n_ages: int, delta: float) -> np.ndarray:
    w = np.full(n_ages + 1, delta)
    w[0] = w[-1] = 0.5 * delta
    return w


def build_R0(spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> ReproductiveOperator:
    """Constant-environment net reproductive matrix with sigma and perron.

    Entry-wise this is the trapezoid of diag(m(a)) E(a) over [0, a_max],
    E being the linearized propagator.
    """
    _require_environment(spec, "constant", "build_R0")
    tables = RateTables(spec, grid)
    n_ages = tables.n_ages
    weights = _age_weights(n_ages, tables.delta)
    m_all = tables.column_m(0.0)
    W = np.zeros((tables.n, tables.n))

    def accumulate(j, E):
        W[...] += weights[j] * (m_all[j][:, None] * E[0])

    propagator_scan(tables, np.array([0.0]), n_ages, accumulate)
    sigma, perron = power_iteration(W)
    return ReproductiveOperator("constant", W, sigma, perron, 1)


def _kbar_batch(tables: RateTables, rhos: np.ndarray) -> np.ndarray:
    """Nonlinear lifetime-offspring map for a batch of constant newborn vectors."""
    n_ages = tables.n_ages
    values, _ = phi_batch(tables, rhos, np.zeros(rhos.shape[0]), n_ages)
    m_all = tables.column_m(0.0)
    return _trapz(m_all[:, None, :] * values, dx=tables.delta, axis=0)


def apply_Kbar(rho, spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> np.ndarray:
    """Lifetime offspring of a constant newborn vector (nonlinear)."""
    _require_environment(spec, "constant", "apply_Kbar")
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (spec.n_patches,):
        raise ValueError("rho must be an N-vector")
    if np.any(rho < 0):
        raise ValueError("rho must be nonnegative")
    tables = RateTables(spec, grid)
    return _kbar_batch(tables, rho[None, :])[0]


def _bracketed_iteration(apply_map, perron, rtol, atol, max_iterations):
    """Two-sided monotone iteration along the Perron direction.

    Returns (midpoint, converged, iterations). apply_map acts on a stacked
    pair (2, ...) -> (2, ...): row 0 the rising lower iterate, row 1 the
    falling upper one.
    """
    lower = LOWER_SEED * perron
    upper = perron.copy()
    for _ in range(60):
        image = apply_map(upper[None, ...])[0]
        if np.all(image <= upper + 1e-15):
            break
        upper = upper * 2.0
    else:
        raise BracketFailureError("no saturating upper bracket found (map not sublinear at scale?)")

    pair = np.stack([lower, upper])
    iterations = 0
    converged = False
    scale = float(np.max(np.abs(pair[1])))
    while iterations < max_iterations:
        pair = apply_map(pair)
        iterations += 1
        gap = float(np.max(np.abs(pair[1] - pair[0])))
        scale = float(np.max(np.abs(pair[1])))
        if np.any(pair[0] > pair[1] + rtol * scale + 1e-9):
            raise BracketFailureError("lower iterate exceeded the upper one")
        if gap <= rtol * scale + atol:
            converged = True
            break
    return 0.5 * (pair[0] + pair[1]), converged, iterations


def solve_rho_star(spec: ScenarioSpec, grid: AgeTimeGrid | None = None,
                   rtol: float = FIXED_POINT_RTOL, atol: float = FIXED_POINT_ATOL) -> FixedPoint:
    """Stationary newborn equilibrium (zero when sigma <= 1).

    For sigma > 1 runs rising and falling monotone iterations of the
    nonlinear lifetime-offspring map, started below and above the
    equilibrium along the Perron direction, until they agree.
    """
    _require_environment(spec, "constant", "solve_rho_star")
    operator = build_R0(spec, grid)
    n = spec.n_patches
    if operator.sigma <= 1.0:
        return FixedPoint("stationary", np.zeros(n), None, True, 0)
    tables = RateTables(spec, grid)
    rho_star, converged, iterations = _bracketed_iteration(
        lambda pair: _kbar_batch(tables, pair), operator.perron, rtol, atol, MAX_FIXED_POINT_ITERATIONS
    )
    return FixedPoint("stationary", rho_star, None, converged, iterations)


# ---------------------------------------------------------------------------
# Periodic environment


class PeriodicKernels:
    """Precomputed stage coefficients for cohorts born at each phase.

    Cohorts born at phase q live at times q*delta + x, so all Runge-Kutta
    stage coefficients are fixed by the scenario; evaluating the periodic
    birth map then costs pure arithmetic per age step.
    """

    def __init__(self, spec: ScenarioSpec, grid: AgeTimeGrid | None = None):
        _require_environment(spec, "periodic", "periodic operators")
        self.tables = RateTables(spec, grid)
        g = self.tables.grid
        if g.period is None:
            raise ValueError("periodic operators require grid.period")
        self.n = spec.n_patches
        self.n_ages = self.tables.n_ages
        self.n_phases = g.n_phases
        self.delta = g.delta
        self.phases = np.arange(self.n_phases) * self.delta
        d = self.delta
        self.stages = []
        for j in range(self.n_ages):
            x = j * d
            self.stages.append(
                (
                    self.tables.phi_stage(j, 0, self.phases + x),
                    self.tables.phi_stage(j, 1, self.phases + x + 0.5 * d),
                    self.tables.phi_stage(j, 2, self.phases + x + d),
                )
            )
        # birth rates per (age node, receiving phase): (J+1, M, N)
        self.m_phase = np.stack([self.tables.m_phi(j, self.phases) for j in range(self.n_ages + 1)])
        # receiving phase of a cohort born at phase q observed at age node j
        base = np.arange(self.n_phases)
        self.recv = np.stack([(base + j) % self.n_phases for j in range(self.n_ages + 1)])
        self.weights = _age_weights(self.n_ages, d)

    def birth_map(self, rhos: np.ndarray, linear: bool = False) -> np.ndarray:
        """Periodic birth map on stacked per-phase newborn tables (B, M, N)."""
        v = np.array(rhos, dtype=float)
        out = np.zeros_like(v)
        d = self.delta
        self._accumulate(out, v, 0)
        for j in range(self.n_ages):
            s0, sh, s1 = self.stages[j]
            k1 = self._rhs(v, s0, linear)
            k2 = self._rhs(v + 0.5 * d * k1, sh, linear)
            k3 = self._rhs(v + 0.5 * d * k2, sh, linear)
            k4 = self._rhs(v + d * k3, s1, linear)
            v = v + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            np.clip(v, 0.0, None, out=v)
            self._accumulate(out, v, j + 1)
        return out

    @staticmethod
    def _rhs(v, stage, linear):
        # v: (B, M, N); mu, L: (M, N); D: (M, N, N)
        mu, L, D = stage
        w = v if linear else v + v * v / L
        return -mu * w + np.einsum("mkl,bml->bmk", D, v)

    def _accumulate(self, out, values, j):
        # cohort born at phase q contributes at phase (q + j) % M
        r = self.recv[j]
        out[:, r, :] += self.weights[j] * self.m_phase[j, r, :] * values

    def assemble_matrix(self) -> np.ndarray:
        """Dense (N*M) x (N*M) matrix of the linearized periodic operator."""
        M, n = self.n_phases, self.n
        blocks = np.zeros((M, M, n, n))
        cols = np.arange(M)

        def accumulate(j, E):
            r = self.recv[j]
            blocks[r, cols] += self.weights[j] * self.m_phase[j, r][:, :, None] * E

        propagator_scan(self.tables, self.phases, self.n_ages, accumulate)
        return blocks.transpose(0, 2, 1, 3).reshape(M * n, M * n)


def build_R0_periodic(spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> ReproductiveOperator:
    """Periodic net reproductive operator collocated at the M grid phases."""
    kernels = PeriodicKernels(spec, grid)
    matrix = kernels.assemble_matrix()
    sigma, perron_flat = power_iteration(matrix)
    perron = perron_flat.reshape(kernels.n_phases, kernels.n)
    return ReproductiveOperator("periodic", matrix, sigma, perron, kernels.n_phases)


def solve_rho_star_periodic(spec: ScenarioSpec, grid: AgeTimeGrid | None = None,
                            rtol: float = FIXED_POINT_RTOL, atol: float = FIXED_POINT_ATOL) -> FixedPoint:
    """Periodic newborn equilibrium (zero trajectory when sigma <= 1)."""
    kernels = PeriodicKernels(spec, grid)
    operator = build_R0_periodic(spec, grid)
    times = kernels.phases.copy()
    if operator.sigma <= 1.0:
        zero = NewbornTrajectory(times, np.zeros((kernels.n_phases, kernels.n)))
        return FixedPoint("periodic", None, zero, True, 0)
    rho_star, converged, iterations = _bracketed_iteration(
        kernels.birth_map, operator.perron, rtol, atol, MAX_FIXED_POINT_ITERATIONS
    )
    return FixedPoint("periodic", None, NewbornTrajectory(times, rho_star), converged, iterations)
