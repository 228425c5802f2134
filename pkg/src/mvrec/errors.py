"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ParameterError (and click usage
errors) exit 2, DataError and subclasses exit 3, NumericError exit 4.
"""


class DataError(Exception):
    """Input data failed validation (malformed files, broken invariants)."""


class ParseError(DataError):
    """A file could not be parsed; message carries path and line number."""

    def __init__(self, path, lineno: int, reason: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


class EmptyAfterKCoreError(DataError):
    """Iterative k-core filtering removed every interaction."""


class DuplicateItemIdError(DataError):
    """The same item id appeared twice in a metadata file."""


class TemplateError(DataError):
    """A prompt template is malformed or references an unknown view."""


class StoreFormatError(DataError):
    """An embedding-store file violates the binary format contract."""


class DegenerateEmbeddingError(DataError):
    """A zero-norm embedding vector, for which cosine is undefined."""

    def __init__(self, item, view, detail: str = "zero-norm embedding"):
        self.item = item
        self.view = view
        super().__init__(f"{detail} at item {item}, view {view}")


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class NumericError(Exception):
    """A numeric failure during optimization (NaN/Inf loss or parameters)."""
