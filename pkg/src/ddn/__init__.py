"""Deep density network CTR model with separated data, measurement and model
uncertainty, plus a closed-loop marketplace simulator for exploration."""

from .errors import ConfigError, DataError, DDNError, NumericalError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DDNError", "NumericalError", "UsageError", "__version__"]
