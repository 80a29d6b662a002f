"""Exception types shared across the package."""


class SocrecError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SocrecError):
    """Operand shapes do not chain for the requested operation."""


class ContractError(SocrecError):
    """A caller violated an operation's contract (bad inputs, not shapes)."""


class IngestionError(SocrecError):
    """A dataset file failed to parse or validate.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class ConfigError(SocrecError):
    """A run configuration is malformed (unknown key, bad value)."""


class GradCheckError(SocrecError):
    """The finite-difference verifier hit a non-finite loss."""


class TrainingError(SocrecError):
    """Training aborted (e.g. the loss became non-finite)."""
