"""Exception hierarchy shared across the package."""


class FedReadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedReadError):
    """Invalid model or session configuration."""


class ShapeError(FedReadError):
    """Parameter manifest does not match what the operation expects."""


class DataError(FedReadError):
    """Batch contents violate an invariant (e.g. target on a pad slot)."""


class SpanDecodeError(FedReadError):
    """No feasible (start, end) pair exists for span decoding."""


class ParseError(FedReadError):
    """Input file is malformed."""


class EncodeError(FedReadError):
    """An example cannot be packed into the sequence budget."""


class PartitionError(FedReadError):
    """Requested partition is impossible for the given data."""


class MetricError(FedReadError):
    """Metric computation received invalid arguments."""


class AggregationError(FedReadError):
    """Aggregation received an empty or inconsistent update set."""


class TrainingError(FedReadError):
    """Local training cannot proceed (e.g. empty shard)."""


class ExampleValidationError(FedReadError):
    """A user-supplied example failed offset validation."""


class ProtocolError(FedReadError):
    """Wire frame is corrupt (bad magic, version, kind, or length)."""


class CheckpointError(FedReadError):
    """Checkpoint file is corrupt or inconsistent."""


class RequestError(FedReadError):
    """A service request is invalid."""


class SessionError(FedReadError):
    """A federated session failed; carries the partial round history."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = list(records) if records else []
