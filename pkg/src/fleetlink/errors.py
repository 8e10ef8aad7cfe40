"""Exception hierarchy shared by every fleetlink component.

Errors that cross a trust boundary (wire decoding, module storage,
expression evaluation) carry enough context to name the offending
field, module, or construct.
"""


class FleetError(Exception):
    """Base class for all fleetlink errors."""

    code = "fleet_error"


class ParseError(FleetError):
    """Malformed input that could not be read at all (bad JSON, truncated line)."""

    code = "parse_error"


class ProtocolError(FleetError):
    """Structurally valid message that violates the protocol (unknown type, bad seq)."""

    code = "protocol_error"


class ValidationError(FleetError):
    """A field or document failed validation. ``field`` names the offender."""

    code = "validation_error"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class EncodingError(FleetError):
    """Input text that cannot be represented as UTF-8."""

    code = "encoding_error"


class IntegrityError(FleetError):
    """Content does not match its claimed signature."""

    code = "integrity_error"


class NotFoundError(FleetError):
    """A referenced module, assignment, or client does not exist."""

    code = "not_found"


class StorageError(FleetError):
    """Filesystem failure while persisting or reading a module."""

    code = "storage_error"


class EvaluationError(FleetError):
    """Runtime failure while evaluating an expression (bad types, math domain, non-finite)."""

    code = "evaluation_error"


class ResourceLimitError(EvaluationError):
    """Evaluation exceeded the interpreter step budget."""

    code = "resource_limit"


class NetworkError(FleetError):
    """A peer was unreachable or a connection failed."""

    code = "network_error"
