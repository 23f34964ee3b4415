"""Exception hierarchy shared across the package."""


class RaadError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RaadError):
    """Shape mismatch; the message names the offending axis."""


class ParameterError(RaadError):
    """A parameter value outside its documented domain."""


class ContractError(RaadError):
    """A call-sequence or state precondition was violated."""


class ConfigError(RaadError):
    """Invalid configuration; the message carries the field path."""


class PipelineOrderError(RaadError):
    """A pipeline stage was invoked before its prerequisites exist."""


class DatasetContractError(RaadError):
    """The dataset violates a split contract (e.g. anomalies in train)."""


class UndefinedMetricError(RaadError):
    """A metric was requested on inputs where it is undefined."""


class ImageParseError(RaadError):
    """Malformed image file; the message names the byte offset."""
