"""Exception types shared across the package."""


class ScenarioError(Exception):
    """Base class for problems with scenario documents or their contents."""


class ParseError(ScenarioError):
    """The scenario document is not well-formed (e.g. invalid JSON)."""


class SchemaError(ScenarioError):
    """The document parses but violates the scenario schema."""


class StepFeasibilityError(ScenarioError):
    """The grid step is too coarse for the implicit boundary solve."""


class EnvelopeError(ScenarioError):
    """Irregular rates escape their declared periodic envelopes."""


class NumericalError(Exception):
    """Base class for runtime numerical failures."""


class IntegrationFailureError(NumericalError):
    """A cohort integration blew up or produced an invalid value."""


class PowerIterationError(NumericalError):
    """Power iteration failed to converge (reducible/degenerate matrix)."""


class BracketFailureError(NumericalError):
    """Monotone fixed-point brackets crossed; results are inconsistent."""
