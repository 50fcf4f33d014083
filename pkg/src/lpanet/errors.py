"""Exception hierarchy shared by every module."""


class LPANetError(Exception):
    pass


class DimensionError(LPANetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LPANetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(LPANetError, ValueError):
    """A file does not follow its declared text format."""


class ValidationError(LPANetError, ValueError):
    """Input violates a semantic precondition (duplicates, normalization...)."""


class UsageError(LPANetError, RuntimeError):
    """An API was called in a state that does not allow it."""


class GenerationError(LPANetError, RuntimeError):
    """Synthetic scene placement failed."""
