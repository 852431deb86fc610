"""Exception hierarchy shared across the pipeline.

Exit codes used by the CLI: 2 configuration, 3 data/parse, 4 numerical.
"""


class CG4DError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigurationError(CG4DError):
    """Invalid option, shape mismatch, or unsatisfied precondition."""

    exit_code = 2


class SceneParseError(CG4DError):
    """Malformed scene file; the message names the offending field."""

    exit_code = 3

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"scene field '{field}': {message}")


class NumericalError(CG4DError):
    """Non-finite loss or output encountered at runtime."""

    exit_code = 4
