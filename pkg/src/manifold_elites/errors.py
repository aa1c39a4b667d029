"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised for dimension mismatches and invalid configs."""


class TrainingError(RuntimeError):
    """Raised when optimisation encounters non-finite values."""


class ModelHealthError(RuntimeError):
    """Raised when a fitted model produces non-finite outputs."""


class DegenerateCovarianceError(RuntimeError):
    """Raised when a covariance cannot be factorised even with maximum jitter."""
