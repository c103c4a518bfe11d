"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array extents violate an operation's shape contract."""


class FlowFormatError(ValueError):
    """A .flo file is malformed (bad magic tag or truncated payload)."""


class InputError(ValueError):
    """An operation received an incomplete or inconsistent input set."""


class CacheMismatchError(ValueError):
    """A backward pass was handed a cache that does not match its cotangent."""


class ManifestError(ValueError):
    """A dataset root does not satisfy the documented layout."""


class EvaluationError(RuntimeError):
    """Evaluation cannot proceed (e.g. prediction files are missing)."""


class TrainingDivergedError(RuntimeError):
    """The gradient-descent demo diverged (loss exceeded 10x its start)."""
