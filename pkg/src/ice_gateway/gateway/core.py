"""Session handling and in-flight injection.

Conversation scope: after every segment appended to a transcript, each
injection that has come due is appended as a control segment. Messages are
never split, so an injection lands on the first boundary at or after its
threshold.

Chain-of-thought scope: streamed reasoning is split at the exact token where
the threshold falls. The gateway stops reading, closes the upstream stream,
records the reasoning so far and the control text, then asks the upstream to
continue from the modified context. Text the upstream produced past the cut
is dropped; the continuation regenerates it.
"""

from __future__ import annotations

import logging
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, AsyncIterator

from ice_gateway.control_store import CONTEXT_TAIL_TOKENS, ControlBank, ControlStore, SelectionStrategy
from ice_gateway.errors import IceError, PolicyInvalid
from ice_gateway.gateway.upstream import AbortFailed, Upstream, UpstreamEndpoint, UpstreamError, UpstreamStream
from ice_gateway.scheduler import (
    IcePolicy,
    InjectionPlan,
    RatioReport,
    Scope,
    ratio_report,
    record_injection,
    should_inject,
)
from ice_gateway.tokenizer import TokenCounter
from ice_gateway.transcript import SegmentKind, Transcript, UPSTREAM_ROLE, Visibility

logger = logging.getLogger(__name__)

DEFAULT_CONTINUATION_INSTRUCTION = (
    "Continue your reasoning from the exact point where it stopped, without repeating any earlier text."
)

_ROLE_KIND = {"user": SegmentKind.USER, "assistant": SegmentKind.ASSISTANT}


class MalformedRequest(IceError):
    pass


class SessionNotFound(IceError, KeyError):
    pass


class SessionBusy(IceError):
    pass


class ContinuationFailed(IceError):
    pass


@dataclass
class StreamSplice:
    emitted_payload_tokens: int = 0
    splice_points: list[int] = field(default_factory=list)
    continuation_count: int = 0
    # splices made at a chunk boundary because the upstream could not be aborted
    degraded_points: list[int] = field(default_factory=list)


@dataclass
class Session:
    transcript: Transcript
    plan: InjectionPlan
    policy: IcePolicy
    upstream: UpstreamEndpoint | None = None
    splices: list[StreamSplice] = field(default_factory=list)
    busy: bool = False

    @property
    def id(self) -> str:
        return self.transcript.session_id

    def consistent(self) -> bool:
        tr = self.transcript
        return (self.plan.injections_so_far == tr.ice_count
                and self.plan.ice_tokens_so_far == tr.ice_tokens)

    def report(self) -> RatioReport:
        tr = self.transcript
        nominal = self.policy.nominal_s_ice if self.policy.enabled else 0
        return ratio_report(tr.total_tokens, tr.control_tokens, tr.ice_lengths(), self.policy.period_t, nominal)


@dataclass(frozen=True)
class ClientEvent:
    """One piece of output bound for the client.

    ``kind`` is ``reasoning``, ``content``, ``ice`` or ``error``; for ``ice``
    events ``splice_point`` is the absolute token offset of a reasoning
    splice, or ``None`` for an injection at a message boundary.
    """

    kind: str
    text: str
    splice_point: int | None = None


@dataclass
class _StreamState:
    splice: StreamSplice = field(default_factory=StreamSplice)
    buf: str = ""       # reasoning received since the last committed reasoning segment
    emitted: int = 0    # characters of ``buf`` already sent to the client
    content: str = ""
    delivered: list[str] = field(default_factory=list)

    def deliver(self, kind: str, text: str) -> ClientEvent:
        self.delivered.append(text)
        return ClientEvent(kind, text)


def continuation_messages(tr: Transcript, instruction: str = DEFAULT_CONTINUATION_INSTRUCTION) -> list[dict[str, str]]:
    """Render ``tr`` as the request that resumes an interrupted generation.

    The interrupted generation is the trailing run of reasoning and control
    segments that starts with a reasoning segment. Its reasoning parts are
    merged into one assistant message, followed by its control texts as
    system messages; the instruction to carry on is appended to the last one.
    """
    segs = tr.segments
    if not segs or segs[-1].kind is not SegmentKind.ICE_CONTROL:
        raise ValueError("a continuation must follow a control segment")
    start = len(segs)
    while start > 0 and segs[start - 1].kind in (SegmentKind.REASONING, SegmentKind.ICE_CONTROL):
        start -= 1
    while start < len(segs) and segs[start].kind is not SegmentKind.REASONING:
        start += 1
    if start == len(segs):
        raise ValueError("no reasoning precedes the control segment")
    head, run = segs[:start], segs[start:]
    messages = [{"role": UPSTREAM_ROLE[s.kind], "content": s.text} for s in head]
    messages.append({"role": "assistant",
                     "content": "".join(s.text for s in run if s.kind is SegmentKind.REASONING)})
    controls = [s.text for s in run if s.kind is SegmentKind.ICE_CONTROL]
    messages.extend({"role": "system", "content": text} for text in controls[:-1])
    messages.append({"role": "system", "content": f"{controls[-1]}\n\n{instruction}"})
    return messages


def _message_text(content: Any) -> str:
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = []
        for part in content:
            if not isinstance(part, dict) or part.get("type") != "text" or not isinstance(part.get("text"), str):
                raise MalformedRequest("only text content parts are supported")
            parts.append(part["text"])
        return "".join(parts)
    raise MalformedRequest("message content must be a string or a list of text parts")


def parse_chat_request(body: Any) -> tuple[list[tuple[str, str]], bool, dict]:
    """Validate a client chat request; returns ``(messages, stream, passthrough)``."""
    if not isinstance(body, dict):
        raise MalformedRequest("request body must be a JSON object")
    raw = body.get("messages")
    if not isinstance(raw, list) or not raw:
        raise MalformedRequest("messages must be a nonempty array")
    messages = []
    for m in raw:
        if not isinstance(m, dict):
            raise MalformedRequest("every message must be an object")
        role = m.get("role")
        if role not in ("system", "user", "assistant"):
            raise MalformedRequest(f"unsupported role {role!r}")
        messages.append((role, _message_text(m.get("content"))))
    stream = body.get("stream", False)
    if not isinstance(stream, bool):
        raise MalformedRequest("stream must be a boolean")
    passthrough = {k: v for k, v in body.items() if k not in ("messages", "stream", "model")}
    return messages, stream, passthrough


class Gateway:
    def __init__(self, policy: IcePolicy, bank: ControlBank, upstream: Upstream, *,
                 strategy: SelectionStrategy | None = None,
                 counter: TokenCounter | None = None,
                 endpoint: UpstreamEndpoint | None = None,
                 continuation_instruction: str = DEFAULT_CONTINUATION_INSTRUCTION,
                 transcript_dir: str | Path | None = None,
                 max_continuations: int = 10_000):
        self.policy = policy
        self.bank = bank
        self.upstream = upstream
        self.strategy = strategy or (policy.ice_source if isinstance(policy.ice_source, SelectionStrategy)
                                     else SelectionStrategy())
        self.counter = counter or TokenCounter()
        self.endpoint = endpoint
        self.continuation_instruction = continuation_instruction
        self.transcript_dir = Path(transcript_dir) if transcript_dir else None
        self.max_continuations = max_continuations
        self.sessions: dict[str, Session] = {}
        self._checked_store: ControlStore | None = None
        self.check_store(bank.store)

    @property
    def model(self) -> str:
        return self.endpoint.model if self.endpoint else "ice-upstream"

    def check_store(self, store: ControlStore) -> None:
        """Raise :class:`PolicyInvalid` unless ``store`` can serve this policy."""
        # stores are immutable, so one successful check per store object suffices
        if not self.policy.enabled or store is self._checked_store:
            return
        try:
            store.validate(self.strategy)
            candidates = store.candidates(self.strategy)
        except IceError as exc:
            raise PolicyInvalid(str(exc)) from exc
        self.policy.check_lengths(s.token_count for s in candidates)
        self._checked_store = store

    def reload_store(self) -> int:
        return len(self.bank.reload(check=self.check_store))

    # sessions

    def new_session(self, session_id: str | None = None) -> Session:
        tr = Transcript(self.counter, session_id or uuid.uuid4().hex)
        session = Session(tr, self.policy.new_plan(), self.policy, self.endpoint)
        self.sessions[tr.session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise SessionNotFound(session_id) from None

    def report(self, session_id: str) -> RatioReport:
        return self.get_session(session_id).report()

    # injection

    def _inject_due(self, session: Session, splice_point: int | None = None) -> list[ClientEvent]:
        tr = session.transcript
        events = []
        store = self.bank.store
        while should_inject(session.plan, tr.total_tokens):
            sentence = store.select(self.strategy, tr.payload_tail(CONTEXT_TAIL_TOKENS),
                                    session.plan.injections_so_far)
            seg = tr.append(SegmentKind.ICE_CONTROL, sentence.text)
            session.plan = record_injection(session.plan, seg.token_count)
            if self.policy.visibility is Visibility.VISIBLE:
                events.append(ClientEvent("ice", seg.text, splice_point))
        return events

    def _boundary(self, session: Session) -> list[ClientEvent]:
        if Scope.CONVERSATION in self.policy.scope:
            return self._inject_due(session)
        return []

    def record_message(self, session: Session, role: str, text: str) -> list[ClientEvent]:
        """Append one whole message and any injections that fall due at its end.

        A ``system`` message opens the transcript as its system prompt; later
        ones are recorded as user text, since only the operator's first
        prompt counts as control text.
        """
        tr = session.transcript
        if role == "system":
            kind = SegmentKind.SYSTEM_PROMPT if not tr.segments else SegmentKind.USER
        else:
            kind = _ROLE_KIND[role]
        tr.append(kind, text)
        return self._boundary(session)

    # request handling

    def _upstream_payload(self, messages: list[dict], passthrough: dict) -> dict:
        return {**passthrough, "model": self.model, "messages": messages, "stream": True}

    def _persist(self, session: Session) -> None:
        if self.transcript_dir is not None:
            self.transcript_dir.mkdir(parents=True, exist_ok=True)
            session.transcript.dump(self.transcript_dir / f"{session.id}.jsonl")

    async def open_chat(self, body: Any, session_id: str | None = None) -> tuple[Session, AsyncIterator[ClientEvent]]:
        """Record the request, fire due injections and connect upstream.

        Returns the session and an event iterator that must be drained; the
        session stays busy until it is. Request-level failures (bad input,
        unknown or busy session, invalid policy, unreachable upstream) raise
        here with the transcript left as it was.
        """
        messages, _, passthrough = parse_chat_request(body)
        if session_id is None:
            session, fresh = self.new_session(), True
        else:
            session, fresh = self.get_session(session_id), False
        if session.busy:
            raise SessionBusy(f"session {session.id} already has a request in flight")
        self.check_store(self.bank.store)
        session.busy = True
        tr = session.transcript
        checkpoint, plan_before = len(tr), session.plan
        try:
            if not fresh:
                last_assistant = max((i for i, (role, _) in enumerate(messages) if role == "assistant"), default=-1)
                messages = messages[last_assistant + 1:]
            pre_events: list[ClientEvent] = []
            for role, text in messages:
                pre_events += self.record_message(session, role, text)
            stream = await self.upstream.open(self._upstream_payload(tr.render_for_upstream(), passthrough))
        except BaseException:
            tr.truncate(checkpoint)
            session.plan = plan_before
            session.busy = False
            if fresh:
                self.sessions.pop(session.id, None)
            raise
        return session, self._run(session, stream, passthrough, pre_events)

    async def _run(self, session: Session, stream: UpstreamStream, passthrough: dict,
                   pre_events: list[ClientEvent]) -> AsyncIterator[ClientEvent]:
        try:
            for ev in pre_events:
                yield ev
            async for ev in self._intercept(session, stream, passthrough):
                yield ev
        finally:
            session.busy = False
            self._persist(session)

    async def _intercept(self, session: Session, stream: UpstreamStream,
                         passthrough: dict) -> AsyncIterator[ClientEvent]:
        state = _StreamState()
        session.splices.append(state.splice)
        try:
            async for ev in self._pump(session, stream, passthrough, state):
                yield ev
        finally:
            tr = session.transcript
            if state.buf[:state.emitted]:
                tr.append(SegmentKind.REASONING, state.buf[:state.emitted])
            if state.content:
                tr.append(SegmentKind.ASSISTANT, state.content)
            state.splice.emitted_payload_tokens = self.counter.count("".join(state.delivered))
        for ev in self._boundary(session):
            yield ev

    async def _pump(self, session: Session, stream: UpstreamStream, passthrough: dict,
                    state: _StreamState) -> AsyncIterator[ClientEvent]:
        tr, counter, splice = session.transcript, self.counter, state.splice
        cot = Scope.CHAIN_OF_THOUGHT in self.policy.scope
        while True:
            spliced = False
            try:
                async for delta in stream:
                    if delta.reasoning:
                        state.buf += delta.reasoning
                        need = max(1, session.plan.next_trigger_at - tr.total_tokens)
                        if cot and counter.stable_count(state.buf) >= need:
                            prefix, _ = counter.split_at_or_after(state.buf, need)
                            try:
                                await stream.abort()
                            except AbortFailed as exc:
                                logger.warning("abort failed (%s); injecting at the chunk boundary", exc)
                                prefix = state.buf
                                point = tr.total_tokens + counter.count(prefix)
                                splice.degraded_points.append(point)
                            else:
                                point = tr.total_tokens + counter.count(prefix)
                                splice.splice_points.append(point)
                                spliced = True
                            if len(prefix) > state.emitted:
                                yield state.deliver("reasoning", prefix[state.emitted:])
                            tr.append(SegmentKind.REASONING, prefix)
                            state.buf, state.emitted = "", 0
                            for ev in self._inject_due(session, splice_point=point):
                                yield ev
                            if spliced:
                                break
                        elif len(state.buf) > state.emitted:
                            text = state.buf[state.emitted:]
                            state.emitted = len(state.buf)
                            yield state.deliver("reasoning", text)
                    if delta.content:
                        state.content += delta.content
                        yield state.deliver("content", delta.content)
            except UpstreamError as exc:
                yield ClientEvent("error", f"upstream stream failed: {exc}")
                return
            if not spliced:
                return
            if splice.continuation_count >= self.max_continuations:
                yield ClientEvent("error", "continuation limit reached")
                return
            payload = self._upstream_payload(
                continuation_messages(tr, self.continuation_instruction), passthrough)
            try:
                stream = await self.upstream.open(payload)
            except UpstreamError as exc:
                failure = ContinuationFailed(f"upstream rejected the resume request: {exc}")
                yield ClientEvent("error", str(failure))
                return
            splice.continuation_count += 1

    # convenience wrappers

    async def chat(self, body: Any, session_id: str | None = None) -> tuple[Session, dict]:
        """Non-streaming request: drain the events into one chat completion."""
        session, events = await self.open_chat(body, session_id)
        reasoning, content, controls, errors = [], [], [], []
        async for ev in events:
            {"reasoning": reasoning, "content": content, "ice": controls, "error": errors}[ev.kind].append(ev.text)
        if errors:
            raise ContinuationFailed("; ".join(errors))
        return session, self.completion_json(session, "".join(reasoning), "".join(content), controls)

    def completion_json(self, session: Session, reasoning: str, content: str, controls: list[str]) -> dict:
        message: dict[str, Any] = {"role": "assistant", "content": content}
        if reasoning:
            message["reasoning_content"] = reasoning
        if controls:
            message["ice_control"] = controls
        return {
            "id": f"icecmpl-{uuid.uuid4().hex[:24]}",
            "object": "chat.completion",
            "created": int(time.time()),
            "model": self.model,
            "choices": [{"index": 0, "message": message, "finish_reason": "stop"}],
        }
