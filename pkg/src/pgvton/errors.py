"""Exception hierarchy shared by every stage of the try-on pipeline."""


class PGVTError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(PGVTError, ValueError):
    """Bad argument, shape mismatch, or out-of-range parameter."""


class DatasetError(PGVTError, OSError):
    """Missing or corrupt dataset file."""


class CheckpointError(PGVTError, OSError):
    """Checkpoint missing, truncated, or written for another module/version."""


class NumericalError(PGVTError, ArithmeticError):
    """Non-finite loss or an unsolvable linear system."""

    def __init__(self, message, stage=None, iteration=None):
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__(" ".join(parts))
        self.stage = stage
        self.iteration = iteration


class AssemblyError(ValidationError):
    """Try-on masks overlap where they must be disjoint."""
