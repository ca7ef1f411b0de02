"""Top-level persistence analysis.

Ties the pieces together: spectral radius of the net reproductive
operator, the matching equilibrium, a forward march, and convergence
evidence. For irregularly varying environments the envelope analysis
builds the two periodic comparison problems whose equilibria bracket the
newborn trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EnvelopeError
from .renewal import NewbornTrajectory, march
from .scenario import (
    AgeTimeGrid,
    IrregularSamples,
    Rate,
    ScenarioSpec,
    VitalRates,
    DispersionSpec,
    validate_scenario,
)
from .spectral import (
    FixedPoint,
    build_R0,
    build_R0_periodic,
    solve_rho_star,
    solve_rho_star_periodic,
)

_trapz = getattr(np, "trapezoid", np.trapz)

DEFAULT_SANDWICH_EPSILON = 0.05


@dataclass
class PersistenceVerdict:
    """Spectral verdict plus forward-simulation evidence."""

    sigma: float
    classification: str  # "extinction" or "persistence"
    fixed_point: FixedPoint
    evidence: dict


@dataclass
class EnvelopePair:
    """Periodic comparison problems bracketing an irregular scenario."""

    lower: ScenarioSpec
    upper: ScenarioSpec
    epsilon: float


@dataclass
class EnvelopeReport:
    sigma_minus: float
    sigma_plus: float
    classification: str  # "extinction", "persistence" or "indeterminate by this method"
    rho_minus: Optional[FixedPoint]
    rho_plus: Optional[FixedPoint]
    sandwich: Optional[dict]
    newborns: NewbornTrajectory


def _require_valid(spec: ScenarioSpec):
    diagnostics = validate_scenario(spec)
    if diagnostics:
        raise ValueError("scenario fails validation: " + "; ".join(diagnostics))


def _gap_series(rho: np.ndarray, target: np.ndarray, denom: float) -> np.ndarray:
    return np.max(np.abs(rho - target), axis=1) / denom


def _monotone_tail(gaps: np.ndarray, indices: np.ndarray) -> bool:
    # additive slack at the equilibrium solver's resolution: once the gap
    # saturates there, its micro-variation carries no information
    sampled = gaps[indices]
    return bool(np.all(sampled[1:] <= sampled[:-1] * (1.0 + 1e-6) + 1e-8))


def _tail_indices(n_times: int, delta: float, stride_steps: int) -> np.ndarray:
    start = n_times // 2
    stride = max(1, stride_steps)
    idx = np.arange(start, n_times + 1, stride)
    if idx[-1] != n_times:
        idx = np.append(idx, n_times)
    return idx


def classify(spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> PersistenceVerdict:
    """Persistence verdict for a constant or periodic scenario.

    Computes the net reproductive rate, the matching equilibrium, marches
    the scenario forward, and reports the relative distance of rho(t_end)
    to the equilibrium (phase-aligned in the periodic case) together with
    a monotone-tail flag for the gap over [t_end/2, t_end].
    """
    _require_valid(spec)
    g = grid if grid is not None else spec.grid
    if spec.environment == "constant":
        operator = build_R0(spec, grid)
        fixed_point = solve_rho_star(spec, grid)
        target = np.broadcast_to(fixed_point.rho_star, (g.n_time_steps + 1, spec.n_patches))
        stride = round(1.0 / g.delta)
    elif spec.environment == "periodic":
        operator = build_R0_periodic(spec, grid)
        fixed_point = solve_rho_star_periodic(spec, grid)
        phases = np.arange(g.n_time_steps + 1) % g.n_phases
        target = fixed_point.trajectory.rho[phases]
        stride = g.n_phases
    else:
        raise ValueError("classify handles constant or periodic environments; use envelope_analysis")

    result = march(spec, grid, keep_field=False)
    rho = result.newborns.rho
    sigma = operator.sigma
    classification = "persistence" if sigma > 1.0 else "extinction"

    if classification == "persistence":
        denom = max(float(np.max(np.abs(target))), 1e-300)
    else:
        denom = max(float(np.max(np.abs(rho))), 1e-300)
    gaps = _gap_series(rho, target, denom)
    idx = _tail_indices(g.n_time_steps, g.delta, stride)
    evidence = {
        "final_rho": rho[-1].copy(),
        "relative_gap": float(gaps[-1]),
        "monotone_tail": _monotone_tail(gaps, idx),
        "peak": float(np.max(np.abs(rho))),
    }
    return PersistenceVerdict(sigma, classification, fixed_point, evidence)


def _survival_exponent(rates_nodes: np.ndarray, delta: float) -> np.ndarray:
    """Cumulative trapezoid of per-age rates, shape matching the input."""
    inner = 0.5 * delta * (rates_nodes[1:] + rates_nodes[:-1])
    return np.concatenate([np.zeros((1,) + rates_nodes.shape[1:]), np.cumsum(inner, axis=0)])


def isolated_rates(spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> np.ndarray:
    """Net reproductive rate of each patch in isolation (dispersal removed)."""
    if spec.environment != "constant":
        raise ValueError("isolated_rates requires a constant environment")
    g = grid if grid is not None else spec.grid
    ages = g.ages()
    mu = np.column_stack([r.profile.sample(ages) for r in spec.rates.mu])
    m = np.column_stack([r.profile.sample(ages) for r in spec.rates.m])
    survival = np.exp(-_survival_exponent(mu, g.delta))
    return _trapz(m * survival, dx=g.delta, axis=0)


def dispersal_lower_bound(spec: ScenarioSpec, grid: AgeTimeGrid | None = None) -> float:
    """Worst-case lower bound on sigma: every emigrant dies in transit.

    Discounts each patch by its own outflow |D_kk| on top of mortality and
    takes the best patch.
    """
    if spec.environment != "constant":
        raise ValueError("dispersal_lower_bound requires a constant environment")
    g = grid if grid is not None else spec.grid
    ages = g.ages()
    n = spec.n_patches
    mu = np.column_stack([r.profile.sample(ages) for r in spec.rates.mu])
    m = np.column_stack([r.profile.sample(ages) for r in spec.rates.m])
    outflow = np.zeros((ages.size, n))
    if spec.dispersion.diagonal_mode == "mass_conserving":
        for (k, j), rate in spec.dispersion.offdiag.items():
            outflow[:, j] += rate.profile.sample(ages)
    else:
        for k, rate in spec.dispersion.diagonal.items():
            outflow[:, k] += rate.profile.sample(ages)
    survival = np.exp(-_survival_exponent(mu + outflow, g.delta))
    per_patch = _trapz(m * survival, dx=g.delta, axis=0)
    return float(per_patch.max())


# ---------------------------------------------------------------------------
# Envelope (sandwich) analysis for irregular environments


def _envelope_rate(rate: Rate, favorable_high: bool, side: str) -> Rate:
    mod = rate.modulation
    if not isinstance(mod, IrregularSamples):
        return rate
    if side == "upper":
        pick = mod.hi if favorable_high else mod.lo
    else:
        pick = mod.lo if favorable_high else mod.hi
    return Rate(rate.profile, pick)


def _envelope_spec(spec: ScenarioSpec, side: str) -> ScenarioSpec:
    """One periodic comparison problem for an irregular scenario.

    The upper problem takes the growth-favorable envelope of every rate:
    high births, dispersal inflow and regulation scale, low mortality and
    outflow; the lower problem takes the opposite ends.
    """
    mu = tuple(_envelope_rate(r, False, side) for r in spec.rates.mu)
    m = tuple(_envelope_rate(r, True, side) for r in spec.rates.m)
    L = tuple(_envelope_rate(r, True, side) for r in spec.rates.L)
    offdiag = {key: _envelope_rate(r, True, side) for key, r in spec.dispersion.offdiag.items()}
    diagonal = {key: _envelope_rate(r, False, side) for key, r in spec.dispersion.diagonal.items()}
    dispersion = DispersionSpec(offdiag, spec.dispersion.diagonal_mode, diagonal)
    return ScenarioSpec(spec.n_patches, VitalRates(mu, m, L), dispersion, spec.initial, spec.grid, "periodic")


def build_envelope_pair(spec: ScenarioSpec, epsilon: float = DEFAULT_SANDWICH_EPSILON) -> EnvelopePair:
    if spec.environment != "irregular":
        raise ValueError("envelope pairs are built from irregular scenarios")
    return EnvelopePair(_envelope_spec(spec, "lower"), _envelope_spec(spec, "upper"), epsilon)


def _verify_envelopes(spec: ScenarioSpec):
    """Raise EnvelopeError if any irregular sample escapes its envelopes."""
    grid = spec.grid
    step_starts = np.arange(grid.n_time_steps) * grid.delta
    for label, rate in spec.all_rates():
        mod = rate.modulation
        if not isinstance(mod, IrregularSamples):
            continue
        lo = mod.lo.sample(step_starts)
        hi = mod.hi.sample(step_starts)
        vals = np.asarray(mod.samples)
        if np.any(vals < lo - 1e-12) or np.any(vals > hi + 1e-12):
            raise EnvelopeError(f"{label}: irregular samples escape their envelopes")


def envelope_analysis(spec: ScenarioSpec, grid: AgeTimeGrid | None = None,
                      epsilon: float = DEFAULT_SANDWICH_EPSILON,
                      window: Optional[tuple] = None) -> EnvelopeReport:
    """Sandwich analysis of an irregular scenario between periodic problems.

    If the upper problem is subcritical the verdict is extinction; if the
    lower one is supercritical, the marched newborn trajectory is checked
    against the bracket [rho_minus - eps, rho_plus + eps] over the tail
    window (eps = epsilon * max rho_plus, window defaults to the second
    half of the horizon). Anything in between is indeterminate by this
    method.
    """
    _require_valid(spec)
    _verify_envelopes(spec)
    g = grid if grid is not None else spec.grid
    pair = build_envelope_pair(spec, epsilon)
    op_minus = build_R0_periodic(pair.lower, grid)
    op_plus = build_R0_periodic(pair.upper, grid)
    result = march(spec, grid, keep_field=False)
    rho = result.newborns.rho

    if op_plus.sigma <= 1.0:
        return EnvelopeReport(op_minus.sigma, op_plus.sigma, "extinction", None, None, None, result.newborns)
    if op_minus.sigma <= 1.0:
        return EnvelopeReport(
            op_minus.sigma, op_plus.sigma, "indeterminate by this method", None, None, None, result.newborns
        )

    fp_minus = solve_rho_star_periodic(pair.lower, grid)
    fp_plus = solve_rho_star_periodic(pair.upper, grid)
    lo_traj = fp_minus.trajectory.rho
    hi_traj = fp_plus.trajectory.rho
    slack = epsilon * float(np.max(hi_traj))

    if window is None:
        window = (0.5 * g.t_end, g.t_end)
    i_lo = int(round(window[0] / g.delta))
    i_hi = int(round(window[1] / g.delta))
    idx = np.arange(i_lo, i_hi + 1)
    phases = idx % g.n_phases
    below = (lo_traj[phases] - slack) - rho[idx]
    above = rho[idx] - (hi_traj[phases] + slack)
    max_violation = float(max(below.max(), above.max(), 0.0))
    sandwich = {
        "holds": bool(max_violation <= 0.0),
        "window": (float(window[0]), float(window[1])),
        "epsilon": float(epsilon),
        "max_violation": max_violation,
    }
    return EnvelopeReport(op_minus.sigma, op_plus.sigma, "persistence", fp_minus, fp_plus, sandwich, result.newborns)
