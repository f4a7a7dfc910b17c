"""Exception types raised across the toolkit."""


class DegenerateGeometryError(ValueError):
    """Geometry does not constrain the requested quantity (zero lever arm,
    rank-deficient normal set, ...)."""


class RegistrationError(RuntimeError):
    """Scan registration could not produce a usable result."""
