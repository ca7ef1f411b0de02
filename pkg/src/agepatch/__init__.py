"""Age-structured population dynamics on dispersal-coupled patches."""

from .analysis import (
    EnvelopePair,
    EnvelopeReport,
    PersistenceVerdict,
    build_envelope_pair,
    classify,
    dispersal_lower_bound,
    envelope_analysis,
    isolated_rates,
)
from .characteristics import (
    CohortTrajectory,
    MatrixTrajectory,
    fundamental_matrix,
    solve_phi,
    solve_psi,
)
from .errors import (
    BracketFailureError,
    EnvelopeError,
    IntegrationFailureError,
    NumericalError,
    ParseError,
    PowerIterationError,
    ScenarioError,
    SchemaError,
    StepFeasibilityError,
)
from .renewal import (
    MarchResult,
    NewbornTrajectory,
    PopulationField,
    apply_F,
    apply_K,
    march,
    total_population,
)
from .scenario import (
    AgeTimeGrid,
    ConstantProfile,
    DispersionSpec,
    EssentialPositivity,
    IrregularSamples,
    NoModulation,
    PeriodicTable,
    Rate,
    RateSample,
    ScenarioSpec,
    Sinusoidal,
    TableProfile,
    VitalRates,
    WindowProfile,
    check_essential_positivity,
    dispersal_pattern,
    dumps_scenario,
    eval_rates,
    load_scenario,
    scenario_to_dict,
    validate_scenario,
)
from .spectral import (
    FixedPoint,
    ReproductiveOperator,
    apply_Kbar,
    build_R0,
    build_R0_periodic,
    power_iteration,
    solve_rho_star,
    solve_rho_star_periodic,
)

__version__ = "0.1.0"
