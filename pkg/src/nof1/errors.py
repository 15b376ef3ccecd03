"""Exception types shared across the package."""


class Nof1Error(Exception):
    """Base class for errors raised by this package."""


class DataError(Nof1Error, ValueError):
    """Observations violate a model-domain constraint (e.g. y <= 0 for log-normal)."""


class ContractError(Nof1Error, ValueError):
    """Inputs are structurally inconsistent (unknown patient, dimension mismatch)."""


class ConfigError(Nof1Error, ValueError):
    """A configuration document failed validation. ``field`` names the offender."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class FitFailure(Nof1Error, RuntimeError):
    """Posterior approximation could not be formed (non-PD curvature, singular model)."""
