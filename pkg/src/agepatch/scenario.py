"""Model inputs: age profiles, time modulations, dispersal, grids.

A scenario bundles everything the solvers need: per-patch mortality,
birth and regulation rates (each an age profile times a time modulation),
a dispersal matrix, initial age distributions, and the shared age/time
lattice. Scenarios are loaded from JSON documents, validated against the
structural hypotheses (signs, strict positivity, essential positivity of
the dispersal pattern), and evaluated pointwise or on whole grid axes.

All values are immutable after load; irregular environments are
materialized here (seeded, per-step piecewise-constant samples) so that
every downstream solver is deterministic.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ParseError, SchemaError

ENVIRONMENTS = ("constant", "periodic", "irregular")

_REL_TOL = 1e-9


def _is_multiple(x: float, delta: float) -> bool:
    """True if x is a nonnegative integer multiple of delta (fp-tolerant)."""
    n = round(x / delta)
    return n >= 0 and abs(x - n * delta) <= _REL_TOL * max(1.0, abs(x))


def _as_index(x: float, delta: float) -> int:
    return int(round(x / delta))


# ---------------------------------------------------------------------------
# Age profiles


@dataclass(frozen=True)
class ConstantProfile:
    """Age-independent value."""

    value: float

    kind = "constant"

    def sample(self, a):
        return np.full(np.shape(a), float(self.value))

    def max_value(self) -> float:
        return float(self.value)

    def min_value(self) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class TableProfile:
    """Piecewise-linear profile over strictly increasing breakpoints."""

    breakpoints: tuple
    values: tuple
    _bp: np.ndarray = field(init=False, compare=False, repr=False)
    _vals: np.ndarray = field(init=False, compare=False, repr=False)

    kind = "table"

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or bp.size < 2 or vals.shape != bp.shape:
            raise SchemaError("table profile needs matching 1-d breakpoints/values with >= 2 entries")
        if not np.all(np.diff(bp) > 0):
            raise SchemaError("table breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", tuple(float(x) for x in bp))
        object.__setattr__(self, "values", tuple(float(x) for x in vals))
        object.__setattr__(self, "_bp", bp)
        object.__setattr__(self, "_vals", vals)

    def sample(self, a):
        return np.interp(a, self._bp, self._vals)

    def max_value(self) -> float:
        return float(self._vals.max())

    def min_value(self) -> float:
        return float(self._vals.min())

    def to_dict(self) -> dict:
        return {"kind": "table", "breakpoints": list(self.breakpoints), "values": list(self.values)}


@dataclass(frozen=True)
class WindowProfile:
    """Constant value on [a_lo, a_hi), zero elsewhere.

    The half-open support keeps trapezoid quadrature of grid-aligned
    windows exact.
    """

    value: float
    a_lo: float
    a_hi: float

    kind = "window"

    def __post_init__(self):
        if not (0.0 <= self.a_lo < self.a_hi):
            raise SchemaError("window profile requires 0 <= a_lo < a_hi")

    def sample(self, a):
        a = np.asarray(a, dtype=float)
        return np.where((a >= self.a_lo) & (a < self.a_hi), float(self.value), 0.0)

    def max_value(self) -> float:
        return float(max(self.value, 0.0))

    def min_value(self) -> float:
        return float(min(self.value, 0.0))

    def to_dict(self) -> dict:
        return {"kind": "window", "value": self.value, "a_lo": self.a_lo, "a_hi": self.a_hi}


RateProfile = Union[ConstantProfile, TableProfile, WindowProfile]


# ---------------------------------------------------------------------------
# Time modulations


@dataclass(frozen=True)
class NoModulation:
    """Multiplier identically one."""

    kind = "none"
    periodic = True

    def sample(self, t):
        return np.ones(np.shape(t))

    def max_value(self) -> float:
        return 1.0

    def min_value(self) -> float:
        return 1.0

    def to_dict(self) -> dict:
        return {"kind": "none"}


@dataclass(frozen=True)
class Sinusoidal:
    """Multiplier 1 + beta*sin(2*pi*t/period + phase), beta in (-1, 1)."""

    beta: float
    period: float
    phase: float = 0.0

    kind = "sinusoidal"
    periodic = True

    def __post_init__(self):
        if not (-1.0 < self.beta < 1.0):
            raise SchemaError("sinusoidal amplitude beta must lie in (-1, 1)")
        if self.period <= 0:
            raise SchemaError("sinusoidal period must be positive")

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        return 1.0 + self.beta * np.sin(2.0 * np.pi * t / self.period + self.phase)

    def max_value(self) -> float:
        return 1.0 + abs(self.beta)

    def min_value(self) -> float:
        return 1.0 - abs(self.beta)

    def to_dict(self) -> dict:
        return {"kind": "sinusoidal", "beta": self.beta, "period": self.period, "phase": self.phase}


@dataclass(frozen=True)
class PeriodicTable:
    """Periodic piecewise-linear multiplier from samples over one period.

    values[i] is the multiplier at phase i*period/len(values); evaluation
    interpolates linearly and wraps around (values[M] := values[0]).
    """

    values: tuple
    period: float
    _vals: np.ndarray = field(init=False, compare=False, repr=False)

    kind = "periodic_table"
    periodic = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise SchemaError("periodic_table needs a non-empty 1-d sample list")
        if self.period <= 0:
            raise SchemaError("periodic_table period must be positive")
        object.__setattr__(self, "values", tuple(float(x) for x in vals))
        object.__setattr__(self, "_vals", vals)

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        m = self._vals.size
        pos = np.mod(t, self.period) / self.period * m
        i0 = np.floor(pos).astype(int) % m
        frac = pos - np.floor(pos)
        return self._vals[i0] * (1.0 - frac) + self._vals[(i0 + 1) % m] * frac

    def max_value(self) -> float:
        return float(self._vals.max())

    def min_value(self) -> float:
        return float(self._vals.min())

    def to_dict(self) -> dict:
        return {"kind": "periodic_table", "values": list(self.values)}


@dataclass(frozen=True)
class IrregularSamples:
    """Materialized irregular multiplier: one uniform draw per time step.

    The draw for step i is held constant on [i*delta, (i+1)*delta) and
    lies in [lo(t_i), hi(t_i)] where lo/hi are the periodic envelopes.
    Sampling happens once, at load time, from the stored seed.
    """

    samples: tuple
    delta: float
    lo: Union[NoModulation, Sinusoidal, PeriodicTable]
    hi: Union[NoModulation, Sinusoidal, PeriodicTable]
    seed: int
    _vals: np.ndarray = field(init=False, compare=False, repr=False)

    kind = "irregular"
    periodic = False

    def __post_init__(self):
        object.__setattr__(self, "_vals", np.asarray(self.samples, dtype=float))

    def sample(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / self.delta + 1e-12).astype(int)
        idx = np.clip(idx, 0, self._vals.size - 1)
        return self._vals[idx]

    def max_value(self) -> float:
        return float(self._vals.max())

    def min_value(self) -> float:
        return float(self._vals.min())

    def to_dict(self) -> dict:
        return {"kind": "irregular", "lo": self.lo.to_dict(), "hi": self.hi.to_dict(), "seed": self.seed}


TimeModulation = Union[NoModulation, Sinusoidal, PeriodicTable, IrregularSamples]


@dataclass(frozen=True)
class Rate:
    """An age profile scaled by a time modulation: rate(a, t) = p(a)*mod(t)."""

    profile: RateProfile
    modulation: TimeModulation

    def sample(self, a, t):
        return self.profile.sample(a) * self.modulation.sample(t)

    def bounds(self):
        """Interval bounds of rate values over any grid (product of intervals)."""
        pl, ph = self.profile.min_value(), self.profile.max_value()
        ml, mh = self.modulation.min_value(), self.modulation.max_value()
        corners = (pl * ml, pl * mh, ph * ml, ph * mh)
        return min(corners), max(corners)

    def to_dict(self) -> dict:
        return {"profile": self.profile.to_dict(), "modulation": self.modulation.to_dict()}


# ---------------------------------------------------------------------------
# Grid and scenario


@dataclass(frozen=True)
class AgeTimeGrid:
    """Shared age/time lattice: both axes use the same step delta.

    Sharing the step makes every characteristic a - t = const pass through
    lattice nodes, so cohorts never need interpolation.
    """

    delta: float
    a_max: float
    t_end: float
    period: Optional[float] = None

    def __post_init__(self):
        if self.delta <= 0:
            raise SchemaError("grid delta must be positive")
        for name, value in (("a_max", self.a_max), ("t_end", self.t_end)):
            if value <= 0 or not _is_multiple(value, self.delta):
                raise SchemaError(f"grid {name} must be a positive integer multiple of delta")
        if self.period is not None:
            if self.period <= 0 or not _is_multiple(self.period, self.delta):
                raise SchemaError("grid period must be a positive integer multiple of delta")

    @property
    def n_age_steps(self) -> int:
        return _as_index(self.a_max, self.delta)

    @property
    def n_time_steps(self) -> int:
        return _as_index(self.t_end, self.delta)

    @property
    def n_phases(self) -> int:
        if self.period is None:
            raise ValueError("grid has no period")
        return _as_index(self.period, self.delta)

    def ages(self) -> np.ndarray:
        return np.arange(self.n_age_steps + 1) * self.delta

    def times(self) -> np.ndarray:
        return np.arange(self.n_time_steps + 1) * self.delta

    def to_dict(self) -> dict:
        d = {"delta": self.delta, "a_max": self.a_max, "t_end": self.t_end}
        if self.period is not None:
            d["period"] = self.period
        return d


@dataclass(frozen=True)
class VitalRates:
    """Per-patch mortality (mu), birth (m) and regulation (L) rates."""

    mu: tuple
    m: tuple
    L: tuple


@dataclass(frozen=True)
class DispersionSpec:
    """Dispersal coefficients.

    offdiag maps 0-based (k, j), k != j, to the rate D[k][j] >= 0: the
    per-capita inflow into patch k from patch j. The diagonal is either
    derived (mass_conserving: column sums vanish) or explicit, in which
    case `diagonal` holds the outflow magnitude |D[k][k]| applied with a
    negative sign.
    """

    offdiag: dict
    diagonal_mode: str = "mass_conserving"
    diagonal: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.diagonal_mode not in ("explicit", "mass_conserving"):
            raise SchemaError("diagonal_mode must be 'explicit' or 'mass_conserving'")
        if self.diagonal_mode == "mass_conserving" and self.diagonal:
            raise SchemaError("mass_conserving dispersal must not list explicit diagonal entries")


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete model description on the shared grid."""

    n_patches: int
    rates: VitalRates
    dispersion: DispersionSpec
    initial: tuple
    grid: AgeTimeGrid
    environment: str

    def __post_init__(self):
        if self.n_patches < 1:
            raise SchemaError("n_patches must be >= 1")
        if self.environment not in ENVIRONMENTS:
            raise SchemaError(f"environment must be one of {ENVIRONMENTS}")
        for name in ("mu", "m", "L"):
            if len(getattr(self.rates, name)) != self.n_patches:
                raise SchemaError(f"rates.{name} must list one entry per patch")
        if len(self.initial) != self.n_patches:
            raise SchemaError("initial must list one profile per patch")
        for (k, j) in self.dispersion.offdiag:
            if k == j or not (0 <= k < self.n_patches and 0 <= j < self.n_patches):
                raise SchemaError(f"dispersal entry ({k},{j}) out of range or on the diagonal")
        for k in self.dispersion.diagonal:
            if not 0 <= k < self.n_patches:
                raise SchemaError(f"dispersal diagonal entry {k} out of range")

    def all_rates(self):
        """Yield (label, Rate) for every rate in a stable order."""
        for k in range(self.n_patches):
            yield f"patch {k + 1} mu", self.rates.mu[k]
            yield f"patch {k + 1} m", self.rates.m[k]
            yield f"patch {k + 1} L", self.rates.L[k]
        for (k, j) in sorted(self.dispersion.offdiag):
            yield f"dispersal {k + 1}<-{j + 1}", self.dispersion.offdiag[(k, j)]
        for k in sorted(self.dispersion.diagonal):
            yield f"dispersal diagonal {k + 1}", self.dispersion.diagonal[k]


@dataclass(frozen=True)
class RateSample:
    """Pointwise rates at one (age, time)."""

    mu: np.ndarray
    m: np.ndarray
    L: np.ndarray
    D: np.ndarray


# ---------------------------------------------------------------------------
# Document parsing


def _require_keys(d: dict, what: str, required, optional=()):
    if not isinstance(d, dict):
        raise SchemaError(f"{what} must be an object")
    missing = [k for k in required if k not in d]
    extra = [k for k in d if k not in required and k not in optional]
    if missing:
        raise SchemaError(f"{what} missing keys: {', '.join(missing)}")
    if extra:
        raise SchemaError(f"{what} has unknown keys: {', '.join(extra)}")


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{what} must be a number")
    return float(value)


def profile_from_dict(d: dict, what: str) -> RateProfile:
    _require_keys(d, what, ("kind",), ("value", "breakpoints", "values", "a_lo", "a_hi"))
    kind = d["kind"]
    if kind == "constant":
        _require_keys(d, what, ("kind", "value"))
        return ConstantProfile(_number(d["value"], f"{what}.value"))
    if kind == "table":
        _require_keys(d, what, ("kind", "breakpoints", "values"))
        if not isinstance(d["breakpoints"], list) or not isinstance(d["values"], list):
            raise SchemaError(f"{what} breakpoints/values must be lists")
        return TableProfile(tuple(d["breakpoints"]), tuple(d["values"]))
    if kind == "window":
        _require_keys(d, what, ("kind", "value", "a_lo", "a_hi"))
        return WindowProfile(
            _number(d["value"], f"{what}.value"),
            _number(d["a_lo"], f"{what}.a_lo"),
            _number(d["a_hi"], f"{what}.a_hi"),
        )
    raise SchemaError(f"{what} has unknown profile kind '{kind}'")


class _IrregularSeeder:
    """Stable per-modulation seeds, optionally overridden from the CLI.

    With an override S, modulation #i (in document order) draws from the
    stream SeedSequence(S, spawn_key=(i,)), so distinct modulations stay
    independent while the whole document remains reproducible from S.
    """

    def __init__(self, override: Optional[int]):
        self.override = override
        self.count = 0

    def generator(self, declared_seed: int):
        ordinal = self.count
        self.count += 1
        if self.override is None:
            return np.random.Generator(np.random.PCG64(declared_seed))
        seq = np.random.SeedSequence(self.override, spawn_key=(ordinal,))
        return np.random.Generator(np.random.PCG64(seq))


def modulation_from_dict(d: dict, what: str, grid: AgeTimeGrid, seeder: Optional[_IrregularSeeder]) -> TimeModulation:
    _require_keys(d, what, ("kind",), ("beta", "period", "phase", "values", "lo", "hi", "seed"))
    kind = d["kind"]
    if kind == "none":
        _require_keys(d, what, ("kind",))
        return NoModulation()
    if kind == "sinusoidal":
        _require_keys(d, what, ("kind", "beta", "period"), ("phase",))
        return Sinusoidal(
            _number(d["beta"], f"{what}.beta"),
            _number(d["period"], f"{what}.period"),
            _number(d.get("phase", 0.0), f"{what}.phase"),
        )
    if kind == "periodic_table":
        _require_keys(d, what, ("kind", "values"))
        if grid.period is None:
            raise SchemaError(f"{what}: periodic_table modulation requires grid.period")
        if not isinstance(d["values"], list):
            raise SchemaError(f"{what}.values must be a list")
        return PeriodicTable(tuple(d["values"]), grid.period)
    if kind == "irregular":
        _require_keys(d, what, ("kind", "lo", "hi", "seed"))
        if seeder is None:
            raise SchemaError(f"{what}: irregular modulation not allowed here")
        lo = modulation_from_dict(d["lo"], f"{what}.lo", grid, None)
        hi = modulation_from_dict(d["hi"], f"{what}.hi", grid, None)
        seed = d["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise SchemaError(f"{what}.seed must be an integer")
        rng = seeder.generator(seed)
        step_starts = np.arange(grid.n_time_steps) * grid.delta
        lo_vals = lo.sample(step_starts)
        hi_vals = hi.sample(step_starts)
        draws = lo_vals + rng.random(grid.n_time_steps) * (hi_vals - lo_vals)
        return IrregularSamples(tuple(float(x) for x in draws), grid.delta, lo, hi, seed)
    raise SchemaError(f"{what} has unknown modulation kind '{kind}'")


def _check_coverage(profile: RateProfile, grid: AgeTimeGrid, what: str) -> RateProfile:
    if isinstance(profile, TableProfile):
        bp = profile.breakpoints
        if bp[0] > 1e-9 or bp[-1] < grid.a_max - 1e-9:
            raise SchemaError(f"{what}: table breakpoints must cover [0, {grid.a_max}]")
    return profile


def _rate_from_dict(d: dict, what: str, grid: AgeTimeGrid, seeder: _IrregularSeeder) -> Rate:
    _require_keys(d, what, ("profile",), ("modulation",))
    profile = _check_coverage(profile_from_dict(d["profile"], f"{what}.profile"), grid, f"{what}.profile")
    mod_dict = d.get("modulation", {"kind": "none"})
    modulation = modulation_from_dict(mod_dict, f"{what}.modulation", grid, seeder)
    return Rate(profile, modulation)


_EDGE_KEY = re.compile(r"^(\d+)->(\d+)$")


def load_scenario(document: str, seed_override: Optional[int] = None) -> ScenarioSpec:
    """Parse and materialize a scenario JSON document.

    Raises ParseError for malformed JSON and SchemaError for documents
    that violate the schema. Value-level problems (signs, positivity,
    essential positivity, birth support) are left to validate_scenario.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"scenario document is not valid JSON: {exc}") from exc
    _require_keys(doc, "scenario", ("patches", "grid", "environment"), ("dispersion",))

    grid_d = doc["grid"]
    _require_keys(grid_d, "grid", ("delta", "a_max", "t_end"), ("period",))
    period = grid_d.get("period")
    grid = AgeTimeGrid(
        _number(grid_d["delta"], "grid.delta"),
        _number(grid_d["a_max"], "grid.a_max"),
        _number(grid_d["t_end"], "grid.t_end"),
        None if period is None else _number(period, "grid.period"),
    )

    environment = doc["environment"]
    if environment not in ENVIRONMENTS:
        raise SchemaError(f"environment must be one of {ENVIRONMENTS}")

    patches = doc["patches"]
    if not isinstance(patches, list) or not patches:
        raise SchemaError("patches must be a non-empty list")
    n = len(patches)

    seeder = _IrregularSeeder(seed_override)
    mu, m, L, initial = [], [], [], []
    for i, p in enumerate(patches):
        what = f"patches[{i}]"
        _require_keys(p, what, ("mu", "m", "L", "initial"))
        mu.append(_rate_from_dict(p["mu"], f"{what}.mu", grid, seeder))
        m.append(_rate_from_dict(p["m"], f"{what}.m", grid, seeder))
        L.append(_rate_from_dict(p["L"], f"{what}.L", grid, seeder))
        initial.append(_check_coverage(profile_from_dict(p["initial"], f"{what}.initial"), grid, f"{what}.initial"))

    if "dispersion" in doc:
        disp_d = doc["dispersion"]
        _require_keys(disp_d, "dispersion", ("offdiag", "diagonal_mode"), ("diagonal",))
        offdiag = {}
        if not isinstance(disp_d["offdiag"], dict):
            raise SchemaError("dispersion.offdiag must be an object keyed 'k->j'")
        for key in sorted(disp_d["offdiag"]):
            match = _EDGE_KEY.match(key)
            if not match:
                raise SchemaError(f"dispersion.offdiag key '{key}' is not of the form 'k->j'")
            k, j = int(match.group(1)) - 1, int(match.group(2)) - 1
            if k == j:
                raise SchemaError(f"dispersion.offdiag key '{key}' addresses the diagonal")
            if not (0 <= k < n and 0 <= j < n):
                raise SchemaError(f"dispersion.offdiag key '{key}' is out of range for {n} patches")
            offdiag[(k, j)] = _rate_from_dict(disp_d["offdiag"][key], f"dispersion.offdiag[{key}]", grid, seeder)
        mode = disp_d["diagonal_mode"]
        diagonal = {}
        if mode == "explicit":
            diag_d = disp_d.get("diagonal", {})
            if not isinstance(diag_d, dict):
                raise SchemaError("dispersion.diagonal must be an object keyed by patch number")
            for key in sorted(diag_d):
                if not key.isdigit() or not (1 <= int(key) <= n):
                    raise SchemaError(f"dispersion.diagonal key '{key}' is not a patch number in 1..{n}")
                diagonal[int(key) - 1] = _rate_from_dict(diag_d[key], f"dispersion.diagonal[{key}]", grid, seeder)
        elif "diagonal" in disp_d:
            raise SchemaError("dispersion.diagonal is only allowed with diagonal_mode 'explicit'")
        dispersion = DispersionSpec(offdiag, mode, diagonal)
    else:
        if n > 1:
            raise SchemaError("dispersion is required for scenarios with more than one patch")
        dispersion = DispersionSpec({}, "mass_conserving", {})

    return ScenarioSpec(n, VitalRates(tuple(mu), tuple(m), tuple(L)), dispersion, tuple(initial), grid, environment)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    """Canonical document form of a scenario (irregular kinds keep lo/hi/seed)."""
    patches = []
    for k in range(spec.n_patches):
        patches.append(
            {
                "mu": spec.rates.mu[k].to_dict(),
                "m": spec.rates.m[k].to_dict(),
                "L": spec.rates.L[k].to_dict(),
                "initial": spec.initial[k].to_dict(),
            }
        )
    doc = {
        "patches": patches,
        "grid": spec.grid.to_dict(),
        "environment": spec.environment,
    }
    disp = spec.dispersion
    if disp.offdiag or disp.diagonal or spec.n_patches > 1:
        d = {
            "offdiag": {f"{k + 1}->{j + 1}": r.to_dict() for (k, j), r in sorted(disp.offdiag.items())},
            "diagonal_mode": disp.diagonal_mode,
        }
        if disp.diagonal_mode == "explicit":
            d["diagonal"] = {str(k + 1): r.to_dict() for k, r in sorted(disp.diagonal.items())}
        doc["dispersion"] = d
    return doc


def dumps_scenario(spec: ScenarioSpec) -> str:
    return json.dumps(scenario_to_dict(spec), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Validation


def dispersal_pattern(spec: ScenarioSpec) -> np.ndarray:
    """Boolean matrix: entry (k, j) true iff D[k][j] > 0 somewhere on the grid."""
    n = spec.n_patches
    pattern = np.zeros((n, n), dtype=bool)
    for (k, j), rate in spec.dispersion.offdiag.items():
        lo, hi = rate.bounds()
        pattern[k, j] = hi > 0
    return pattern


@dataclass(frozen=True)
class EssentialPositivity:
    """Result of the pattern connectivity check."""

    essentially_positive: bool
    witnesses: dict  # (k, j) -> tuple of patch indices, or None


def check_essential_positivity(pattern: np.ndarray) -> EssentialPositivity:
    """Check strong connectivity of the dispersal pattern digraph.

    pattern[k][j] is an edge k -> j; the matrix is essentially positive iff
    every ordered pair of distinct patches is joined by a directed path.
    Witness paths (node lists, pairwise distinct) are returned when found.
    """
    pattern = np.asarray(pattern, dtype=bool)
    n = pattern.shape[0]
    if pattern.shape != (n, n):
        raise ValueError("pattern must be square")
    if np.any(np.diag(pattern)):
        raise ValueError("pattern diagonal must be false")
    witnesses = {}
    ok = True
    for start in range(n):
        parent = {start: None}
        queue = [start]
        while queue:
            u = queue.pop(0)
            for v in range(n):
                if pattern[u, v] and v not in parent:
                    parent[v] = u
                    queue.append(v)
        for goal in range(n):
            if goal == start:
                continue
            if goal in parent:
                path = [goal]
                while path[-1] != start:
                    path.append(parent[path[-1]])
                witnesses[(start, goal)] = tuple(reversed(path))
            else:
                witnesses[(start, goal)] = None
                ok = False
    return EssentialPositivity(ok, witnesses)


def _check_modulation_envelopes(label: str, mod: IrregularSamples, grid: AgeTimeGrid, out: list):
    step_starts = np.arange(grid.n_time_steps) * grid.delta
    lo = mod.lo.sample(step_starts)
    hi = mod.hi.sample(step_starts)
    vals = np.asarray(mod.samples)
    if np.any(lo > hi):
        out.append(f"{label}: irregular lo envelope exceeds hi envelope")
    if np.any(vals < lo - 1e-12) or np.any(vals > hi + 1e-12):
        out.append(f"{label}: irregular samples escape their envelopes")


def _modulation_shares_period(mod: TimeModulation, period: Optional[float]) -> bool:
    if isinstance(mod, NoModulation):
        return True
    if period is None:
        return False
    if isinstance(mod, Sinusoidal):
        # any exact integer number of cycles per grid period keeps the rate T-periodic
        ratio = period / mod.period
        return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio)) and round(ratio) >= 1
    if isinstance(mod, PeriodicTable):
        return math.isclose(mod.period, period, rel_tol=1e-9)
    return False


def validate_scenario(spec: ScenarioSpec) -> list:
    """Check value-level invariants; returns a list of diagnostics (empty = valid).

    Covers sign conditions (mu > 0, L > 0, m >= 0, off-diagonal dispersal
    >= 0), environment/modulation consistency, envelope containment for
    irregular samples, essential positivity for multi-patch systems, and
    the age-truncation residual of the birth rates.
    """
    out = []
    grid = spec.grid
    env = spec.environment

    # sign conditions via interval bounds of profile*modulation
    for k in range(spec.n_patches):
        lo, _ = spec.rates.mu[k].bounds()
        if lo <= 0:
            out.append(f"patch {k + 1}: mu must be strictly positive on the grid")
        lo, _ = spec.rates.L[k].bounds()
        if lo <= 0:
            out.append(f"patch {k + 1}: L must be strictly positive on the grid")
        lo, _ = spec.rates.m[k].bounds()
        if lo < 0:
            out.append(f"patch {k + 1}: m must be nonnegative on the grid")
        if spec.initial[k].min_value() < 0:
            out.append(f"patch {k + 1}: initial data must be nonnegative")
    for (k, j), rate in sorted(spec.dispersion.offdiag.items()):
        lo, _ = rate.bounds()
        if lo < 0:
            out.append(f"dispersal {k + 1}<-{j + 1}: entries must be nonnegative")
    for k, rate in sorted(spec.dispersion.diagonal.items()):
        lo, _ = rate.bounds()
        if lo < 0:
            out.append(f"dispersal diagonal {k + 1}: outflow magnitude must be nonnegative")

    # environment / modulation consistency
    mods = [(label, r.modulation) for label, r in spec.all_rates()]
    if env == "constant":
        for label, mod in mods:
            if not isinstance(mod, NoModulation):
                out.append(f"{label}: constant environment allows no time modulation")
    elif env == "periodic":
        if grid.period is None:
            out.append("periodic environment requires grid.period")
        for label, mod in mods:
            if isinstance(mod, IrregularSamples):
                out.append(f"{label}: irregular modulation not allowed in a periodic environment")
            elif not _modulation_shares_period(mod, grid.period):
                out.append(f"{label}: modulation period must divide grid.period")
    else:  # irregular
        if grid.period is None:
            out.append("irregular environment requires grid.period (for the envelopes)")
        n_irregular = 0
        for label, mod in mods:
            if isinstance(mod, IrregularSamples):
                n_irregular += 1
                if not (_modulation_shares_period(mod.lo, grid.period) and _modulation_shares_period(mod.hi, grid.period)):
                    out.append(f"{label}: irregular envelopes must share grid.period")
                _check_modulation_envelopes(label, mod, grid, out)
            elif not _modulation_shares_period(mod, grid.period):
                out.append(f"{label}: modulation period must divide grid.period")
        if n_irregular == 0:
            out.append("irregular environment requires at least one irregular modulation")

    # essential positivity of the dispersal pattern
    if spec.n_patches >= 2:
        result = check_essential_positivity(dispersal_pattern(spec))
        if not result.essentially_positive:
            missing = sorted((k + 1, j + 1) for (k, j), w in result.witnesses.items() if w is None)
            out.append(f"dispersal pattern not essentially positive: no path for pairs {missing}")

    # birth support must fit in [0, a_max]
    ages = grid.ages()
    for k in range(spec.n_patches):
        profile = spec.rates.m[k].profile
        if isinstance(profile, WindowProfile):
            if profile.value > 0 and profile.a_hi > grid.a_max + 1e-9:
                out.append(f"patch {k + 1}: birth window extends beyond a_max")
            continue
        tail = float(profile.sample(grid.a_max))
        peak = profile.max_value()
        if tail <= 0 or peak <= 0:
            continue
        mu_profile_min = float(np.min(spec.rates.mu[k].profile.sample(ages)))
        mu_min = mu_profile_min * spec.rates.mu[k].modulation.min_value()
        residual = tail * math.exp(-mu_min * grid.a_max)
        if residual > 1e-8 * peak:
            out.append(
                f"patch {k + 1}: birth rate truncation residual {residual:.3e} exceeds 1e-8 of its peak"
            )

    # initial data support
    for k in range(spec.n_patches):
        profile = spec.initial[k]
        if isinstance(profile, WindowProfile) and profile.value > 0 and profile.a_hi > grid.a_max + 1e-9:
            out.append(f"patch {k + 1}: initial data window extends beyond a_max")

    return out


# ---------------------------------------------------------------------------
# Pointwise evaluation


def dispersal_matrix(spec: ScenarioSpec, a, t) -> np.ndarray:
    """Dense dispersal matrix D(a, t) with the diagonal per diagonal_mode."""
    n = spec.n_patches
    D = np.zeros((n, n))
    for (k, j), rate in spec.dispersion.offdiag.items():
        D[k, j] = rate.sample(a, t)
    if spec.dispersion.diagonal_mode == "mass_conserving":
        np.fill_diagonal(D, 0.0)
        D[np.diag_indices(n)] = -D.sum(axis=0)
    else:
        for k, rate in spec.dispersion.diagonal.items():
            D[k, k] = -rate.sample(a, t)
    return D


def eval_rates(spec: ScenarioSpec, a: float, t: float) -> RateSample:
    """Pointwise rates at (a, t).

    Ages must lie in [0, a_max]. Periodic time kinds accept any t (wrap);
    irregular environments are only defined for t in [0, t_end].
    """
    if not 0.0 <= a <= spec.grid.a_max + 1e-12:
        raise ValueError(f"age {a} outside [0, {spec.grid.a_max}]")
    if spec.environment == "irregular" and not 0.0 <= t <= spec.grid.t_end + 1e-12:
        raise ValueError(f"time {t} outside [0, {spec.grid.t_end}] (irregular environment)")
    mu = np.array([float(r.sample(a, t)) for r in spec.rates.mu])
    m = np.array([float(r.sample(a, t)) for r in spec.rates.m])
    L = np.array([float(r.sample(a, t)) for r in spec.rates.L])
    return RateSample(mu, m, L, dispersal_matrix(spec, a, t))
