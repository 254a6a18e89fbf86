"""
Error types for the spiking engine, data readers and checkpoints.

Every failure the library raises on purpose derives from RegenError so the
CLI can map it onto an exit code.
"""
from pathlib import Path
from typing import Optional


class RegenError(Exception):
    """Base class for all library errors."""


class ShapeError(RegenError, ValueError):
    """Operands have incompatible geometry."""


class InvalidRateError(RegenError, ValueError):
    """Poisson firing probability per step exceeds 1."""


class TopologyError(RegenError, ValueError):
    """Topology string does not match the grammar."""


class ShapeUnderflowError(TopologyError):
    """A kernel or pooling window is larger than the map it is applied to."""


class NumericError(RegenError, ArithmeticError):
    """Non-finite gradient, weight or loss."""


class TrainingAborted(NumericError):
    """Training stopped on a non-finite value after writing a checkpoint."""

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class DataFormatError(RegenError, ValueError):
    """Dataset file does not follow its binary layout."""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class TrailingBytesError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


class RecordSizeError(DataFormatError):
    pass


class EmptyDatasetError(RegenError, ValueError):
    """An operation needs at least one item."""


class CheckpointError(RegenError):
    """Base class for checkpoint failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


class ConfigError(RegenError, ValueError):
    """Config file missing, malformed or inconsistent."""


class UntrainedLayerError(RegenError):
    """A command needs a trained layer that the checkpoint does not have."""


class ExportError(RegenError, OSError):
    """An output file (graymap, CSV, report) could not be written."""
