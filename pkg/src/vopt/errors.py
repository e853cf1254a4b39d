"""Exception types shared across the package."""


class TreeError(ValueError):
    """Malformed tree specification (probabilities, branching, grid)."""


class HazardError(ValueError):
    """Malformed hazard input or violated positivity assumption."""


class AdmissibilityError(ValueError):
    """A measure-change control violates its admissibility conditions."""


class EnumerationCapError(RuntimeError):
    """Exhaustive enumeration would exceed the configured cap."""


class IdentityError(AssertionError):
    """A finite-space identity that should hold exactly failed to hold.

    Raised by operations that compute the same object along two independent
    routes; a residual above tolerance signals an implementation bug, not a
    property of the input.
    """


class ScenarioError(ValueError):
    """Scenario file is malformed or internally inconsistent."""
