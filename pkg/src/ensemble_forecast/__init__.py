"""Next-day price forecasting with a weighted VAE, transformer and LSTM ensemble."""

from .errors import DataError, ForecastError, NumericFault, SchemaError

__version__ = "0.1.0"

__all__ = ["DataError", "ForecastError", "NumericFault", "SchemaError", "__version__"]
