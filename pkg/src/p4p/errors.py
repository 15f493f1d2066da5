"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Tensor or array shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A config document or CLI invocation is malformed before any compute."""


class ArchiveError(ValueError):
    """A tensor archive (manifest + blob) fails structural validation."""


class IncompatibleCheckpointError(ArchiveError):
    """A checkpoint matched zero target tensors during weight transfer."""


class PointFileError(ValueError):
    """A point-cloud file is malformed; message carries line or byte offset."""


class NanActivationError(ArithmeticError):
    """A non-finite activation was produced; message names the stage."""
