"""Exception types shared across the package."""

from __future__ import annotations


class EdgedraftError(Exception):
    """Base class for all package-specific errors."""


class DomainError(EdgedraftError, ValueError):
    """An argument is outside its mathematical domain."""


class VocabMismatch(EdgedraftError):
    """A token id or distribution does not fit the vocabulary in use."""


class NoResidual(EdgedraftError):
    """Target and draft distributions coincide; the residual is undefined."""


class TooLarge(EdgedraftError):
    """Exhaustive enumeration would exceed the configured cap."""


class EmptyCorpus(EdgedraftError):
    """A training corpus contained no tokens."""


class OversizeList(EdgedraftError):
    """A wire-encoded list exceeds u16 capacity."""


class Truncated(EdgedraftError):
    """More bytes are needed to decode a frame (resumable stream state)."""


class Malformed(EdgedraftError):
    """A frame is structurally invalid; connection-fatal."""


class UnknownSession(EdgedraftError):
    """A request referenced a session the server has not seen."""


class StaleRequest(EdgedraftError):
    """A request's base position does not match the session's committed length."""


class UnknownModel(EdgedraftError):
    """A session named a draft model absent from the server registry."""


class ProtocolViolation(EdgedraftError):
    """A peer violated the message-exchange contract."""


class TransportFatal(EdgedraftError):
    """The transport failed and the reliability policy is exhausted."""


class LinkClosed(EdgedraftError):
    """Send attempted on a closed link."""


class EmptyTrace(EdgedraftError):
    """A metric was requested over an empty run trace."""


class Unsupportable(EdgedraftError):
    """Even a single device cannot sustain the target rate."""


class ConfigError(EdgedraftError):
    """Invalid or unknown configuration content."""


class BindError(EdgedraftError):
    """A socket endpoint could not be bound."""


class ConnectError(EdgedraftError):
    """A socket endpoint could not be reached."""
