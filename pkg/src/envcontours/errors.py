"""Exception types shared across the package."""


class EnvContoursError(Exception):
    """Base class for all package errors."""


class SchemaError(EnvContoursError):
    """Input file does not provide the required columns."""


class InputError(EnvContoursError):
    """Input file is unusable (empty, unreadable, wrong format)."""


class AllocationError(EnvContoursError):
    """A covariate value falls outside the binning domain."""


class FitError(EnvContoursError):
    """Model estimation failed (too little data, non-convergence)."""


class DegenerateDataError(FitError):
    """Data carry no usable variation for the requested fit."""


class ExtrapolationError(EnvContoursError):
    """Requested return level lies below the fitted threshold."""


class TransformError(EnvContoursError):
    """Value cannot be mapped through the fitted marginal transform."""


class CalibrationError(EnvContoursError):
    """Probability-content calibration did not behave monotonically."""


class ResolutionError(EnvContoursError):
    """Requested density level cannot be resolved on the evaluation grid."""


class ContourError(EnvContoursError):
    """Contour construction failed (insufficient tail, non-convex output)."""


class UndefinedFactorError(EnvContoursError):
    """Inflation factor is undefined (zero contour-based quantile)."""


class ConfigError(EnvContoursError):
    """Run configuration is invalid."""
