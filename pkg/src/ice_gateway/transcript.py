"""Tagged, token-accounted record of a model's context."""

from __future__ import annotations

import enum
import json
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator

from ice_gateway.errors import IceError
from ice_gateway.tokenizer import TokenCounter


class SystemPromptMisplaced(IceError):
    pass


class EmptyTranscript(IceError):
    pass


class TranscriptParseError(IceError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SegmentKind(str, enum.Enum):
    SYSTEM_PROMPT = "system_prompt"
    USER = "user"
    ASSISTANT = "assistant"
    REASONING = "reasoning"
    ICE_CONTROL = "ice_control"


CONTROL_KINDS = frozenset({SegmentKind.SYSTEM_PROMPT, SegmentKind.ICE_CONTROL})

# role each kind takes in an upstream chat request
UPSTREAM_ROLE = {
    SegmentKind.SYSTEM_PROMPT: "system",
    SegmentKind.USER: "user",
    SegmentKind.ASSISTANT: "assistant",
    SegmentKind.REASONING: "assistant",
    SegmentKind.ICE_CONTROL: "system",
}


class Visibility(str, enum.Enum):
    HIDDEN = "hidden"
    VISIBLE = "visible"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str
    token_count: int
    sequence_index: int

    @property
    def injected_by_policy(self) -> bool:
        return self.kind is SegmentKind.ICE_CONTROL

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "text": self.text,
            "token_count": self.token_count,
            "seq": self.sequence_index,
        }


@dataclass
class Transcript:
    """Ordered segments plus the running totals ``total_tokens`` and ``control_tokens``.

    ``control_tokens`` is the system prompt plus every injected control
    segment. Mutation goes through :meth:`append` so the totals never drift
    from the segment list.
    """

    counter: TokenCounter = field(default_factory=TokenCounter)
    session_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    segments: list[Segment] = field(default_factory=list)
    total_tokens: int = 0
    control_tokens: int = 0
    ice_tokens: int = 0
    ice_count: int = 0

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def append(self, kind: SegmentKind | str, text: str) -> Segment:
        kind = SegmentKind(kind)
        if kind is SegmentKind.SYSTEM_PROMPT and self.segments:
            raise SystemPromptMisplaced("system prompt must be the first segment")
        seg = Segment(kind, text, self.counter.count(text), len(self.segments))
        self.segments.append(seg)
        self.total_tokens += seg.token_count
        if kind in CONTROL_KINDS:
            self.control_tokens += seg.token_count
        if kind is SegmentKind.ICE_CONTROL:
            self.ice_tokens += seg.token_count
            self.ice_count += 1
        return seg

    def truncate(self, length: int) -> None:
        """Drop every segment from position ``length`` on."""
        for seg in self.segments[length:]:
            self.total_tokens -= seg.token_count
            if seg.kind in CONTROL_KINDS:
                self.control_tokens -= seg.token_count
            if seg.kind is SegmentKind.ICE_CONTROL:
                self.ice_tokens -= seg.token_count
                self.ice_count -= 1
        del self.segments[length:]

    @property
    def system_prompt_tokens(self) -> int:
        if self.segments and self.segments[0].kind is SegmentKind.SYSTEM_PROMPT:
            return self.segments[0].token_count
        return 0

    def current_ratio(self) -> Fraction:
        if self.total_tokens == 0:
            raise EmptyTranscript("ratio undefined for a transcript with no tokens")
        return Fraction(self.control_tokens, self.total_tokens)

    def ice_lengths(self) -> list[int]:
        return [s.token_count for s in self.segments if s.kind is SegmentKind.ICE_CONTROL]

    def payload_tail(self, max_tokens: int = 512) -> str:
        """Text of the last ``max_tokens`` tokens of non-control segments."""
        parts: list[str] = []
        need = max_tokens
        for seg in reversed(self.segments):
            if need <= 0:
                break
            if seg.kind in CONTROL_KINDS or not seg.text:
                continue
            if seg.token_count > need:
                _, tail = self.counter.split_at_or_after(seg.text, seg.token_count - need)
                parts.append(tail)
                break
            parts.append(seg.text)
            need -= seg.token_count
        return "\n".join(reversed(parts))

    def render_for_upstream(self) -> list[dict[str, str]]:
        return [{"role": UPSTREAM_ROLE[s.kind], "content": s.text} for s in self.segments]

    def client_view(self, visibility: Visibility | str) -> list[Segment]:
        if Visibility(visibility) is Visibility.VISIBLE:
            return list(self.segments)
        return [s for s in self.segments if s.kind is not SegmentKind.ICE_CONTROL]

    def recount(self) -> tuple[int, int]:
        """Recompute ``(total_tokens, control_tokens)`` from raw segment text."""
        total = control = 0
        for seg in self.segments:
            n = self.counter.count(seg.text)
            total += n
            if seg.kind in CONTROL_KINDS:
                control += n
        return total, control

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_json(), ensure_ascii=False) + "\n" for s in self.segments)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_records(cls, records: Iterable[dict], counter: TokenCounter | None = None,
                     session_id: str | None = None) -> Transcript:
        tr = cls(counter or TokenCounter())
        if session_id:
            tr.session_id = session_id
        for rec in records:
            tr.append(rec["kind"], rec["text"])
        return tr


@dataclass(frozen=True)
class LoadedRecord:
    line: int
    kind: SegmentKind
    text: str
    stored_token_count: int
    seq: int


def parse_jsonl(text: str) -> list[LoadedRecord]:
    """Parse the line-delimited segment format, reporting the offending line on error."""
    records: list[LoadedRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TranscriptParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise TranscriptParseError(lineno, "expected a JSON object")
        try:
            kind = SegmentKind(obj["kind"])
        except (KeyError, ValueError):
            raise TranscriptParseError(lineno, f"bad or missing kind: {obj.get('kind')!r}") from None
        text_ = obj.get("text")
        count = obj.get("token_count")
        seq = obj.get("seq")
        if not isinstance(text_, str):
            raise TranscriptParseError(lineno, "text must be a string")
        if not isinstance(count, int) or count < 0:
            raise TranscriptParseError(lineno, "token_count must be a nonnegative integer")
        if seq != len(records):
            raise TranscriptParseError(lineno, f"seq {seq!r} out of order, expected {len(records)}")
        if kind is SegmentKind.SYSTEM_PROMPT and records:
            raise TranscriptParseError(lineno, "system prompt must be the first segment")
        records.append(LoadedRecord(lineno, kind, text_, count, seq))
    if not records:
        raise TranscriptParseError(1, "empty transcript file")
    return records


def load_jsonl(path: str | Path, counter: TokenCounter | None = None) -> Transcript:
    records = parse_jsonl(Path(path).read_text(encoding="utf-8"))
    return Transcript.from_records(
        ({"kind": r.kind, "text": r.text} for r in records), counter
    )
