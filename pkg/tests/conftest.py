"""Shared builders and analytic oracles for the test suite."""

import json

import numpy as np

from agepatch import build_R0, load_scenario
from agepatch.scenario import (
    AgeTimeGrid,
    ConstantProfile,
    DispersionSpec,
    NoModulation,
    Rate,
    ScenarioSpec,
    Sinusoidal,
    TableProfile,
    VitalRates,
    WindowProfile,
)

# ---------------------------------------------------------------------------
# JSON document builders (for load/CLI tests)


def constant(v):
    return {"kind": "constant", "value": v}


def window(v, lo, hi):
    return {"kind": "window", "value": v, "a_lo": lo, "a_hi": hi}


def table(breakpoints, values):
    return {"kind": "table", "breakpoints": breakpoints, "values": values}


def rate(profile, modulation=None):
    d = {"profile": profile}
    if modulation is not None:
        d["modulation"] = modulation
    return d


def one_patch_doc(mu=0.5, m=1.0, L=100.0, f=None, delta=0.02, a_max=40.0, t_end=120.0,
                  period=None, environment="constant", m_modulation=None, as_dict=False):
    grid = {"delta": delta, "a_max": a_max, "t_end": t_end}
    if period is not None:
        grid["period"] = period
    doc = {
        "patches": [
            {
                "mu": rate(constant(mu)),
                "m": rate(constant(m), m_modulation),
                "L": rate(constant(L)),
                "initial": f if f is not None else window(5.0, 0.0, 10.0),
            }
        ],
        "grid": grid,
        "environment": environment,
    }
    return doc if as_dict else json.dumps(doc)


# ---------------------------------------------------------------------------
# Programmatic scenario builders


def crate(v):
    return Rate(ConstantProfile(v), NoModulation())


def ring_dispersal(n, d):
    """Symmetric nearest-neighbour ring (strongly connected for n >= 2)."""
    offdiag = {}
    for k in range(n):
        offdiag[(k, (k + 1) % n)] = crate(d)
        offdiag[(k, (k - 1) % n)] = crate(d)
    return DispersionSpec(offdiag, "mass_conserving", {})


def make_spec(mu, m, L, f, grid, dispersion=None, environment="constant"):
    """Build a spec from per-patch profile/Rate lists (floats mean constants)."""

    def as_rate(x):
        if isinstance(x, Rate):
            return x
        if isinstance(x, (int, float)):
            return crate(float(x))
        return Rate(x, NoModulation())

    def as_profile(x):
        if isinstance(x, (int, float)):
            return ConstantProfile(float(x))
        return x

    mu, m, L, f = list(mu), list(m), list(L), list(f)
    n = len(mu)
    if dispersion is None:
        dispersion = DispersionSpec({}, "mass_conserving", {}) if n == 1 else ring_dispersal(n, 0.1)
    return ScenarioSpec(
        n,
        VitalRates(tuple(as_rate(x) for x in mu), tuple(as_rate(x) for x in m), tuple(as_rate(x) for x in L)),
        dispersion,
        tuple(as_profile(x) for x in f),
        grid,
        environment,
    )


def one_patch_spec(mu=0.5, m=1.0, L=100.0, f=None, grid=None, environment="constant"):
    if grid is None:
        grid = AgeTimeGrid(0.02, 40.0, 120.0)
    if f is None:
        f = WindowProfile(5.0, 0.0, 10.0)
    return make_spec([mu], [m], [L], [f], grid, environment=environment)


def _scale_profile(p, c):
    if isinstance(p, ConstantProfile):
        return ConstantProfile(p.value * c)
    if isinstance(p, WindowProfile):
        return WindowProfile(p.value * c, p.a_lo, p.a_hi)
    if isinstance(p, TableProfile):
        return TableProfile(p.breakpoints, tuple(v * c for v in p.values))
    raise TypeError(f"cannot scale {type(p)}")


def scale_births(spec, factor):
    """New spec with every birth profile scaled (sigma scales linearly)."""
    m = tuple(Rate(_scale_profile(r.profile, factor), r.modulation) for r in spec.rates.m)
    return ScenarioSpec(
        spec.n_patches,
        VitalRates(spec.rates.mu, m, spec.rates.L),
        spec.dispersion,
        spec.initial,
        spec.grid,
        spec.environment,
    )


def random_constant_spec(rng, n_patches=None, target_sigma=None, grid=None):
    """Random validated constant scenario (ring dispersal, window births)."""
    if grid is None:
        grid = AgeTimeGrid(0.05, 20.0, 20.0)
    n = int(n_patches if n_patches is not None else rng.integers(1, 4))
    a_max = grid.a_max
    mu, m, L, f = [], [], [], []
    for _ in range(n):
        if rng.random() < 0.5:
            mu.append(crate(float(rng.uniform(0.4, 1.2))))
        else:
            vals = rng.uniform(0.4, 1.2, size=3)
            mu.append(Rate(TableProfile((0.0, a_max / 2, a_max), tuple(vals)), NoModulation()))
        a_lo = float(rng.choice([0.0, 1.0, 2.0]))
        a_hi = float(rng.choice([8.0, 10.0, 12.0, 14.0]))
        m.append(Rate(WindowProfile(float(rng.uniform(0.5, 2.0)), a_lo, a_hi), NoModulation()))
        L.append(crate(float(rng.uniform(50.0, 300.0))))
        f.append(WindowProfile(float(rng.uniform(0.5, 3.0)), 0.0, 8.0))
    dispersion = None if n == 1 else ring_dispersal(n, float(rng.uniform(0.02, 0.3)))
    spec = make_spec(mu, m, L, f, grid, dispersion)
    if target_sigma is not None:
        sigma = build_R0(spec).sigma
        spec = scale_births(spec, target_sigma / sigma)
    return spec


def irregular_one_patch_doc(m0=1.0, beta=0.3, lo_frac=0.8, hi_frac=1.2, seed=42,
                            mu=0.5, L=100.0, delta=0.05, a_max=20.0, t_end=60.0,
                            period=1.0, f=None, as_dict=False):
    """Irregular birth-rate scenario with proportional sinusoid-shaped envelopes."""
    n_phase = round(period / delta)
    phases = np.arange(n_phase) / n_phase
    shape = 1.0 + beta * np.sin(2.0 * np.pi * phases)
    modulation = {
        "kind": "irregular",
        "lo": {"kind": "periodic_table", "values": (lo_frac * shape).tolist()},
        "hi": {"kind": "periodic_table", "values": (hi_frac * shape).tolist()},
        "seed": seed,
    }
    doc = {
        "patches": [
            {
                "mu": rate(constant(mu)),
                "m": rate(window(m0, 0.0, 0.75 * a_max), modulation),
                "L": rate(constant(L)),
                "initial": f if f is not None else window(5.0, 0.0, 10.0),
            }
        ],
        "grid": {"delta": delta, "a_max": a_max, "t_end": t_end, "period": period},
        "environment": "irregular",
    }
    return doc if as_dict else json.dumps(doc)


# ---------------------------------------------------------------------------
# Scalar analytic oracles


def logistic_decay(a, rho, mu, L):
    """Closed-form scalar cohort value: solves h' = -mu (h + h^2/L), h(0) = rho."""
    a = np.asarray(a, dtype=float)
    e = np.exp(-mu * a)
    return rho * e / (1.0 + (rho / L) * (1.0 - e))


def scalar_rho_star(mu, m, L):
    """Root of the scalar equilibrium condition ln(1+x)/x = mu/m, times L."""
    from scipy.optimize import bisect

    target = mu / m

    def g(x):
        return np.log1p(x) / x - target

    x = bisect(g, 1e-9, 1e9, xtol=1e-12, rtol=1e-14)
    return L * x
