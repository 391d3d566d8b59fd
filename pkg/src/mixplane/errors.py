"""Exception types shared across the package."""


class MixplaneError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(MixplaneError):
    """Schema definition or schema-conformance violation."""


class RegistrationError(MixplaneError):
    """Dataset registration failed; the catalog is unchanged."""


class QueryError(MixplaneError):
    """A filter query references unknown properties or is otherwise invalid."""


class MixtureError(MixplaneError):
    """Invalid mixture specification."""


class IndexBuildError(MixplaneError):
    """Interval rows handed to the index builder are inconsistent."""


class DataReadError(MixplaneError):
    """A data file could not be read or a record range is out of bounds."""


class ProtocolError(MixplaneError):
    """Malformed or unexpected message on the wire."""


class ServerError(MixplaneError):
    """Job-level failure reported by the server."""


class CheckpointError(MixplaneError):
    """Checkpoint could not be written, found, or restored."""


class FeedbackError(MixplaneError):
    """Training feedback rejected (out-of-order step, bad payload)."""
