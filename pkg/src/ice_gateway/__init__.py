"""Streaming LLM gateway that injects operator control text every ``t`` tokens.

The gateway keeps a per-session transcript, fires control-sentence injections
on a fixed token period and splices them into streamed reasoning output, so
the ratio of control text to total context stays above ``s_ice / t``.
"""

from ice_gateway.control_store import ControlSentence, ControlStore, SelectionStrategy
from ice_gateway.errors import IceError
from ice_gateway.scheduler import IcePolicy, InjectionPlan
from ice_gateway.tokenizer import TokenCounter
from ice_gateway.transcript import Segment, SegmentKind, Transcript

__all__ = [
    "ControlSentence",
    "ControlStore",
    "IceError",
    "IcePolicy",
    "InjectionPlan",
    "Segment",
    "SegmentKind",
    "SelectionStrategy",
    "TokenCounter",
    "Transcript",
]

__version__ = "0.1.0"
