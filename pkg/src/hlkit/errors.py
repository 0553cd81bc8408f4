"""Exception types shared across the package."""


class HlkitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HlkitError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(HlkitError, ValueError):
    """A value that must be finite is NaN or infinite."""


class DegenerateInputError(HlkitError, ValueError):
    """An input is degenerate for the requested operation (e.g. zero-norm
    embedding fed to cosine similarity, usually a sign of a broken model)."""


class ConfigError(HlkitError, ValueError):
    """A configuration value or config file is invalid."""


class AnnotationError(HlkitError, ValueError):
    """An annotation record is malformed.

    Carries the 1-based source line and offending field when the record came
    from a file.
    """

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field {field!r}: "
        super().__init__(prefix + message)


class MetricError(HlkitError, ValueError):
    """A ranking metric is undefined for the given inputs (e.g. average
    precision with no positives)."""


class FileFormatError(HlkitError, IOError):
    """A binary or line-delimited artifact file violates its format."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FileFormatError):
    """File carries an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ends before the data its header declares."""


class CorruptHeaderError(FileFormatError):
    """Header contents are inconsistent (bad directory entry, duplicate id,
    offset past end of file, ...)."""


class DuplicateItemError(HlkitError, ValueError):
    """Two items with the same id were offered to a writer or store."""


class CheckpointShapeError(FileFormatError):
    """Checkpoint payload shapes do not match the expected configuration.

    Names the first mismatching tensor.
    """

    def __init__(self, tensor: str, expected, actual):
        self.tensor = tensor
        super().__init__(
            f"tensor {tensor!r}: expected shape {tuple(expected)}, file has {tuple(actual)}"
        )


class TrainingAbortError(HlkitError, RuntimeError):
    """A training step produced a non-finite loss or gradient.

    Carries the name of the offending tensor so the failure is actionable.
    """

    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message if tensor is None else f"{message} (tensor {tensor!r})")
