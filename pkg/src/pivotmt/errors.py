"""Exception types shared across the package."""


class ConfigError(ValueError):
    """An option or option combination that the requested mode forbids."""


class AccessViolation(PermissionError):
    """A training or selection phase tried to read held-out test data."""


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN or infinite loss."""
