"""Exception types shared across the package."""


class TraceSeqError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TraceSeqError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(TraceSeqError):
    """A configuration value or key is invalid."""


class ValidationError(TraceSeqError):
    """Input data violates a documented precondition."""


class ContractError(TraceSeqError):
    """An API was used in a way its contract forbids."""


class DataError(TraceSeqError):
    """A record references an index or category outside its vocabulary."""


class PrerequisiteError(TraceSeqError):
    """A pipeline stage was invoked before the stage it depends on."""

    def __init__(self, missing_stage: str, detail: str = ""):
        self.missing_stage = missing_stage
        msg = f"missing prerequisite stage '{missing_stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DivergenceError(TraceSeqError):
    """Training produced a non-finite value; names the first bad tensor."""
