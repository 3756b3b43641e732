"""Deterministic stand-in for an upstream chat model.

Three behaviours:

* ``echo_deterministic`` emits pseudo-random words seeded by the seed and the
  full request text.
* ``scripted`` replays a fixed token list. A request whose last non-system
  message is an assistant message is a continuation; the mock then resumes
  the script right after the longest script prefix that message contains.
* ``compliance_probe`` emits ``MARKER`` for each output token whose trailing
  ``probe_window`` context tokens contain a whole control text, else ``DRIFT``.

A request whose last non-system message is an assistant message continues
that response: echo and probe modes then emit only what is left of
``total_tokens_to_emit`` after the words that message already holds.

The same :class:`MockLLM` runs in process or behind :func:`create_app`.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import random
import time
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable, Iterator, Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from ice_gateway.errors import IceError

MARKER = "MARKER"
DRIFT = "DRIFT"

_VOCAB = (
    "the model considers each step of the problem before it answers and checks "
    "whether a constraint still holds then it revises the plan carefully so that "
    "nothing important is lost along the way"
).split()


class MalformedRequest(IceError, ValueError):
    pass


class MockMode(str, enum.Enum):
    ECHO_DETERMINISTIC = "echo_deterministic"
    SCRIPTED = "scripted"
    COMPLIANCE_PROBE = "compliance_probe"


@dataclass(frozen=True)
class MockBehavior:
    mode: MockMode = MockMode.ECHO_DETERMINISTIC
    seed: int = 0
    emit_chunk_tokens: int = 4
    total_tokens_to_emit: int = 32
    probe_window: int = 512
    # "reasoning" or "content": which delta field carries the output
    channel: str = "reasoning"
    # draw each chunk size uniformly from 1..emit_chunk_tokens
    chunk_jitter: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", MockMode(self.mode))
        if self.emit_chunk_tokens < 1 or self.total_tokens_to_emit < 1 or self.probe_window < 1:
            raise ValueError("chunk size, output length and probe window must be positive")
        if self.emit_chunk_tokens > self.total_tokens_to_emit:
            raise ValueError("emit_chunk_tokens may not exceed total_tokens_to_emit")
        if self.channel not in ("reasoning", "content"):
            raise ValueError(f"unknown channel {self.channel!r}")

    def override(self, raw: str) -> MockBehavior:
        """Apply an ``X-Mock-Behavior`` header: a bare mode name or a JSON object of fields."""
        raw = raw.strip()
        if not raw.startswith("{"):
            return replace(self, mode=MockMode(raw))
        data = json.loads(raw)
        known = {f.name for f in fields(self)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown behaviour fields: {sorted(unknown)}")
        return replace(self, **data)


def validate_request(request: Any) -> list[dict[str, str]]:
    if not isinstance(request, dict):
        raise MalformedRequest("request body must be a JSON object")
    messages = request.get("messages")
    if not isinstance(messages, list) or not messages:
        raise MalformedRequest("messages must be a nonempty array")
    for m in messages:
        if not isinstance(m, dict) or not isinstance(m.get("role"), str) or not isinstance(m.get("content"), str):
            raise MalformedRequest("every message needs string role and content")
    return messages


def _normalise(text: str) -> str:
    return " ".join(text.split())


class MockLLM:
    def __init__(self, behavior: MockBehavior | None = None, *, script: Sequence[str] = (),
                 final_content: str = "", probe_texts: Iterable[str] = (), model: str = "mock-1"):
        self.behavior = behavior or MockBehavior()
        self.script = tuple(script)
        self.script_text = "".join(self.script)
        self._script_ends = []
        pos = 0
        for tok in self.script:
            pos += len(tok)
            self._script_ends.append(pos)
        self.final_content = final_content
        self.probe_texts = tuple(t for t in (_normalise(p) for p in probe_texts) if t)
        self.model = model

    def generate(self, request: dict, behavior: MockBehavior | None = None) -> Iterator[dict]:
        """Yield ``{"reasoning": str, "content": str}`` deltas, one per chunk."""
        b = behavior or self.behavior
        messages = validate_request(request)
        if b.mode is MockMode.SCRIPTED:
            yield from self._scripted(b, messages)
        elif b.mode is MockMode.COMPLIANCE_PROBE:
            yield from self._chunked(b, self._probe_tokens(b, messages), salt=b"probe")
        else:
            yield from self._chunked(b, self._echo_tokens(b, messages), salt=b"echo")

    def _delta(self, b: MockBehavior, text: str) -> dict:
        if b.channel == "reasoning":
            return {"reasoning": text, "content": ""}
        return {"reasoning": "", "content": text}

    def _rng(self, b: MockBehavior, salt: bytes, extra: str) -> random.Random:
        digest = hashlib.sha256(b"%d|" % b.seed + salt + b"|" + extra.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _chunked(self, b: MockBehavior, tokens: list[str], salt: bytes, key: str = "") -> Iterator[dict]:
        rng = self._rng(b, salt + b"chunks", key + "".join(tokens)) if b.chunk_jitter else None
        i = 0
        while i < len(tokens):
            size = rng.randint(1, b.emit_chunk_tokens) if rng else b.emit_chunk_tokens
            yield self._delta(b, "".join(tokens[i:i + size]))
            i += size

    @staticmethod
    def continued_text(messages: list[dict]) -> str | None:
        """Content of the response being continued, or None for a fresh request."""
        last = next((m for m in reversed(messages) if m["role"] != "system"), None)
        return last["content"] if last is not None and last["role"] == "assistant" else None

    def _budget(self, b: MockBehavior, messages: list[dict]) -> tuple[int, bool]:
        done = self.continued_text(messages)
        if done is None:
            return b.total_tokens_to_emit, False
        return max(0, b.total_tokens_to_emit - len(done.split())), True

    @staticmethod
    def _spaced(words: list[str], continuing: bool) -> list[str]:
        if not words:
            return []
        return [words[0] if not continuing else " " + words[0]] + [" " + w for w in words[1:]]

    def _echo_tokens(self, b: MockBehavior, messages: list[dict]) -> list[str]:
        rendered = "\n".join(f"{m['role']}:{m['content']}" for m in messages)
        rng = self._rng(b, b"echo", rendered)
        n, continuing = self._budget(b, messages)
        return self._spaced([rng.choice(_VOCAB) for _ in range(n)], continuing)

    def resume_offset(self, messages: list[dict]) -> int:
        """Character offset into the script at which generation should resume."""
        done = self.continued_text(messages)
        if done is None or not self.script_text:
            return 0
        lo, hi = 0, len(self.script_text)
        # presence of a script prefix in ``done`` is monotone in its length
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.script_text[:mid] in done:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def _scripted(self, b: MockBehavior, messages: list[dict]) -> Iterator[dict]:
        start = self.resume_offset(messages)
        tokens: list[str] = []
        if start < len(self.script_text):
            j = bisect.bisect_right(self._script_ends, start)
            tokens.append(self.script_text[start:self._script_ends[j]])
            tokens.extend(self.script[j + 1:])
        yield from self._chunked(b, tokens, salt=b"script", key=str(start))
        if self.final_content:
            yield {"reasoning": "", "content": self.final_content}

    def probe_token(self, window: Sequence[str]) -> str:
        text = " " + " ".join(window) + " "
        return MARKER if any(f" {p} " in text for p in self.probe_texts) else DRIFT

    def _probe_tokens(self, b: MockBehavior, messages: list[dict]) -> list[str]:
        W = b.probe_window
        history = "\n".join(m["content"] for m in messages).split()[-W:]
        n, continuing = self._budget(b, messages)
        out: list[str] = []
        for _ in range(n):
            out.append(self.probe_token(history[-W:]))
            history.append(out[-1])
        return self._spaced(out, continuing)

    def complete(self, request: dict, behavior: MockBehavior | None = None) -> dict:
        reasoning, content = [], []
        for d in self.generate(request, behavior):
            reasoning.append(d["reasoning"])
            content.append(d["content"])
        message = {"role": "assistant", "content": "".join(content)}
        if any(reasoning):
            message["reasoning_content"] = "".join(reasoning)
        return {
            "id": "mockcmpl-" + hashlib.sha256(json.dumps(request, sort_keys=True).encode()).hexdigest()[:16],
            "object": "chat.completion",
            "created": int(time.time()),
            "model": request.get("model") or self.model,
            "choices": [{"index": 0, "message": message, "finish_reason": "stop"}],
        }


def chunk_payload(delta: dict, model: str, chunk_id: str, finish: str | None = None) -> dict:
    out: dict[str, Any] = {}
    if delta.get("reasoning"):
        out["reasoning_content"] = delta["reasoning"]
    if delta.get("content"):
        out["content"] = delta["content"]
    return {
        "id": chunk_id,
        "object": "chat.completion.chunk",
        "model": model,
        "choices": [{"index": 0, "delta": out, "finish_reason": finish}],
    }


def sse(obj: Any) -> str:
    return f"data: {json.dumps(obj, ensure_ascii=False)}\n\n"


def create_app(mock: MockLLM):
    """FastAPI app serving ``mock`` on ``POST /v1/chat/completions``."""
    app = FastAPI(title="ice mock upstream")

    @app.post("/v1/chat/completions")
    async def chat(request: Request):
        try:
            body = await request.json()
        except ValueError:
            return JSONResponse({"error": {"message": "body is not JSON"}}, status_code=400)
        behavior = mock.behavior
        header = request.headers.get("x-mock-behavior")
        try:
            if header:
                behavior = behavior.override(header)
            validate_request(body)
        except (ValueError, TypeError) as exc:
            return JSONResponse({"error": {"message": str(exc)}}, status_code=400)
        if not body.get("stream"):
            return JSONResponse(mock.complete(body, behavior))
        model = body.get("model") or mock.model
        chunk_id = "mockchunk-" + hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

        def events():
            for delta in mock.generate(body, behavior):
                yield sse(chunk_payload(delta, model, chunk_id))
            yield sse(chunk_payload({}, model, chunk_id, finish="stop"))
            yield "data: [DONE]\n\n"

        return StreamingResponse(events(), media_type="text/event-stream")

    return app
