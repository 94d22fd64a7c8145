"""Actor runtime: nodes, supervised services, guardians, error management."""

from .runtime import (
    ActorError,
    DuplicateName,
    ErrorManager,
    ErrorRecord,
    Guardian,
    Node,
    Receipt,
    ResourceExhausted,
    RestartPolicy,
    ServiceContext,
    ServiceDescriptor,
    ServiceHandle,
    Timeout,
    UnknownDestination,
    UnknownId,
    Verdict,
    WatchRow,
)
from .wire import DEFAULT_PORT, PROTOCOL_VERSION, Address, Envelope, WireError

__all__ = [
    "ActorError", "Address", "DEFAULT_PORT", "DuplicateName", "Envelope",
    "ErrorManager", "ErrorRecord", "Guardian", "Node", "PROTOCOL_VERSION",
    "Receipt", "ResourceExhausted", "RestartPolicy", "ServiceContext",
    "ServiceDescriptor", "ServiceHandle", "Timeout", "UnknownDestination",
    "UnknownId", "Verdict", "WatchRow", "WireError",
]
