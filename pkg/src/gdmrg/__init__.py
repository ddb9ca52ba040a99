"""Desk-scale graph-augmented dual-stream report generation on synthetic chest-report labels."""

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, GdmrgError, ShapeError

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "GdmrgError", "ConfigError", "DataError", "ShapeError", "__version__"]
