"""Exception hierarchy shared by every notedx module.

Each class carries a short machine-readable ``code`` that the command line
prints on failure.
"""


class NotedxError(Exception):
    code = "E_NOTEDX"


class InputError(NotedxError, ValueError):
    code = "E_INPUT"


class EmptyCorpusError(InputError):
    code = "E_EMPTY_CORPUS"


class ShapeError(NotedxError, ValueError):
    code = "E_SHAPE"


class ConfigError(NotedxError, ValueError):
    code = "E_CONFIG"


class FileFormatError(NotedxError):
    code = "E_FILE"


class CorruptFileError(FileFormatError):
    code = "E_CORRUPT"


class TruncatedFileError(FileFormatError):
    code = "E_TRUNCATED"


class VersionMismatchError(FileFormatError):
    code = "E_VERSION"


class StageError(NotedxError):
    """A pipeline stage failed; ``stage`` names it."""

    code = "E_STAGE"

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")
