class SurrealDriverError(Exception):
    """Base class for every error raised by surreal_driver."""


class ConfigError(SurrealDriverError):
    pass


class NetworkError(SurrealDriverError):
    """Invalid road network definition or a network the router cannot traverse."""


class OrderingError(SurrealDriverError):
    pass


class ParseError(SurrealDriverError):
    """A reasoner reply did not contain a usable action command."""


class ReasonerUnavailable(SurrealDriverError):
    """The remote reasoner could not be reached or did not answer in time."""


class DemonstrationError(SurrealDriverError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"demonstration {index}: {message}")
        self.index = index


class TraceError(SurrealDriverError):
    pass


class IncompatibleTraceError(TraceError):
    """Trace schema or build version does not match this build."""
