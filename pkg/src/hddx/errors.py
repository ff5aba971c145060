"""Exception hierarchy shared by all modules.

Exit-code contract: 1 = input/validation error, 2 = external-service error,
3 = internal invariant violation.
"""


class HddxError(Exception):
    exit_code = 3


class InputError(HddxError):
    """Bad user input: files, flags, code text, schemas."""

    exit_code = 1


class ParseError(InputError):
    """Syntactically invalid input file (message carries the line number)."""


class StructuralError(InputError):
    """Well-formed file describing an invalid hierarchy (orphan, inversion, cycle)."""


class UnresolvableCodeError(InputError):
    """No prefix of the given code exists in the loaded taxonomy."""


class MappingLookupError(InputError):
    """A diagnosis text is missing from the canonical mapping table."""


class ClientError(HddxError):
    """External embedding/chat service failure."""

    exit_code = 2


class ConfigurationError(ClientError):
    """Client misconfiguration detected before any network call."""


class TransportError(ClientError):
    """Network failure or retry budget exhausted."""


class MalformedResponseError(ClientError):
    """Provider returned a payload the adapter cannot interpret."""


class ScriptError(ClientError):
    """Scripted stub has no response for the request."""


class InvariantError(HddxError):
    """Internal consistency violation; indicates a bug, not bad input."""
