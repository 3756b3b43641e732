from ice_gateway.gateway.core import (
    DEFAULT_CONTINUATION_INSTRUCTION,
    ClientEvent,
    ContinuationFailed,
    Gateway,
    MalformedRequest,
    Session,
    SessionBusy,
    SessionNotFound,
    StreamSplice,
    continuation_messages,
)
from ice_gateway.gateway.upstream import (
    AbortFailed,
    Delta,
    HttpUpstream,
    InProcessUpstream,
    UpstreamEndpoint,
    UpstreamError,
    UpstreamRejected,
    UpstreamUnreachable,
)

__all__ = [
    "AbortFailed", "ClientEvent", "ContinuationFailed", "DEFAULT_CONTINUATION_INSTRUCTION", "Delta",
    "Gateway", "HttpUpstream", "InProcessUpstream", "MalformedRequest", "Session", "SessionBusy",
    "SessionNotFound", "StreamSplice", "UpstreamEndpoint", "UpstreamError", "UpstreamRejected",
    "UpstreamUnreachable", "continuation_messages",
]
