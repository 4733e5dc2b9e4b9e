"""Exception types raised by layerqe.

Library code raises these; :mod:`layerqe.cli` maps them onto exit codes.
"""

from __future__ import annotations

from typing import Optional


class LayerQEError(Exception):
    """Base class for every error raised by layerqe."""


class ShapeError(LayerQEError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(LayerQEError, ValueError):
    """A configuration object or option combination is invalid."""


class LayerIndexError(LayerQEError, IndexError):
    """A (possibly negative) layer index does not resolve inside the model depth."""

    def __init__(self, index: int, n_layers: int):
        super().__init__(f"layer index {index} is out of range for a model with {n_layers} layer(s)")
        self.index = index
        self.n_layers = n_layers


class DataFormatError(LayerQEError):
    """A dataset or prediction file could not be parsed."""

    def __init__(self, message: str, *, path: Optional[object] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ScoreRangeError(DataFormatError):
    """A score lies outside the configured score range."""


class DumpFormatError(LayerQEError):
    """An embedding dump has a bad magic number, version or header."""


class DumpTruncatedError(DumpFormatError):
    """An embedding dump ends before its declared payload."""


class CheckpointError(LayerQEError):
    """A checkpoint file is malformed or does not fit the model it is loaded into."""


class UndefinedCorrelationError(LayerQEError, ValueError):
    """A correlation is undefined, e.g. because one side is constant."""


class TrainingDivergedError(LayerQEError):
    """The training loss became NaN or infinite."""

    def __init__(self, step: int, learning_rate: float, grad_norm: float, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (lr={learning_rate:g}, grad-norm={grad_norm:.6g})"
        )
        self.step = step
        self.learning_rate = learning_rate
        self.grad_norm = grad_norm
        self.loss = loss


class InputError(LayerQEError, ValueError):
    """Token ids, padding masks or sequence lengths are invalid for the model."""
