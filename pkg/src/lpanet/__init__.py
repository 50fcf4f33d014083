"""Progressive RGB/IR feature alignment on a small numpy autodiff engine."""

import os

from threadpoolctl import threadpool_limits

from .errors import (ConfigError, DimensionError, FormatError, GenerationError, LPANetError,
                     UsageError, ValidationError)


def thread_limit() -> int:
    raw = os.environ.get("LPANET_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"LPANET_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"LPANET_THREADS must be >= 1, got {value}")
    return value


threadpool_limits(limits=thread_limit())

__all__ = ["ConfigError", "DimensionError", "FormatError", "GenerationError", "LPANetError",
           "UsageError", "ValidationError", "thread_limit"]
__version__ = "0.1.0"
