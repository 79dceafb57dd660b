"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericsError -> 3, FormatError and OSError -> 4.
"""


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its shape rule."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (wrong root, mixed tapes, ...)."""


class ConfigError(ValueError):
    """An invalid or inconsistent configuration field. Message names the field."""


class NumericsError(RuntimeError):
    """A non-finite value surfaced where finite numbers are required."""


class FormatError(ValueError):
    """A serialized artifact (tensor file, checkpoint, graph) is corrupt."""
