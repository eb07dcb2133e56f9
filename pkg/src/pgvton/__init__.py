"""Progressive image-based virtual try-on on procedurally generated data."""

from .config import Config
from .errors import (AssemblyError, CheckpointError, DatasetError, NumericalError,
                     PGVTError, ValidationError)

__version__ = "0.1.0"

__all__ = ["Config", "AssemblyError", "CheckpointError", "DatasetError", "NumericalError",
           "PGVTError", "ValidationError"]
