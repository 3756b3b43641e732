"""Upstream model connections.

An upstream is anything with ``async open(payload) -> stream``; the stream
yields :class:`Delta` objects and can be aborted mid-generation. Aborting
closes the connection, which every chat-completions server understands.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass
from typing import AsyncIterator, Protocol

import httpx

from ice_gateway.errors import IceError
from ice_gateway.mock_llm import MalformedRequest as MockMalformed
from ice_gateway.mock_llm import MockBehavior, MockLLM, validate_request

logger = logging.getLogger(__name__)


class UpstreamError(IceError):
    pass


class UpstreamUnreachable(UpstreamError):
    pass


class UpstreamRejected(UpstreamError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"upstream answered {status}: {body[:200]}")
        self.status = status
        self.body = body


class AbortFailed(UpstreamError):
    pass


@dataclass(frozen=True)
class Delta:
    reasoning: str = ""
    content: str = ""


def parse_delta(chunk: dict) -> Delta:
    """Pull reasoning and content text out of one chat-completion chunk."""
    choices = chunk.get("choices") or []
    if not choices:
        return Delta()
    delta = choices[0].get("delta") or {}
    reasoning = delta.get("reasoning_content") or delta.get("reasoning") or ""
    content = delta.get("content") or ""
    return Delta(reasoning if isinstance(reasoning, str) else "", content if isinstance(content, str) else "")


class UpstreamStream(Protocol):
    def __aiter__(self) -> AsyncIterator[Delta]: ...

    async def abort(self) -> None: ...


class Upstream(Protocol):
    async def open(self, payload: dict) -> UpstreamStream: ...


@dataclass(frozen=True)
class UpstreamEndpoint:
    base_url: str
    model: str
    auth_header: str | None = None

    @property
    def completions_url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


class _HttpStream:
    def __init__(self, response: httpx.Response):
        self._response = response

    async def __aiter__(self) -> AsyncIterator[Delta]:
        try:
            async for line in self._response.aiter_lines():
                if not line.startswith("data:"):
                    continue
                data = line[5:].strip()
                if data == "[DONE]":
                    break
                try:
                    chunk = json.loads(data)
                except json.JSONDecodeError:
                    logger.warning("skipping undecodable upstream event %r", data[:80])
                    continue
                if "error" in chunk:
                    raise UpstreamRejected(200, json.dumps(chunk["error"]))
                yield parse_delta(chunk)
        except httpx.HTTPError as exc:
            raise UpstreamUnreachable(f"upstream stream broke: {exc}") from exc
        finally:
            await self._response.aclose()

    async def abort(self) -> None:
        try:
            await self._response.aclose()
        except Exception as exc:
            raise AbortFailed(str(exc)) from exc


class HttpUpstream:
    """Chat-completions upstream reached over HTTP with server-sent events."""

    def __init__(self, endpoint: UpstreamEndpoint, client: httpx.AsyncClient | None = None,
                 timeout: float = 60.0, extra_headers: dict[str, str] | None = None):
        self.endpoint = endpoint
        self._client = client or httpx.AsyncClient(timeout=timeout)
        self._headers = dict(extra_headers or {})
        if endpoint.auth_header:
            self._headers["Authorization"] = endpoint.auth_header

    async def open(self, payload: dict) -> _HttpStream:
        request = self._client.build_request(
            "POST", self.endpoint.completions_url, json=payload, headers=self._headers
        )
        try:
            response = await self._client.send(request, stream=True)
        except httpx.HTTPError as exc:
            raise UpstreamUnreachable(f"cannot reach {self.endpoint.completions_url}: {exc}") from exc
        if response.status_code >= 400:
            body = (await response.aread()).decode("utf-8", "replace")
            await response.aclose()
            raise UpstreamRejected(response.status_code, body)
        return _HttpStream(response)

    async def aclose(self) -> None:
        await self._client.aclose()


class _IterStream:
    def __init__(self, deltas):
        self._deltas = deltas
        self.aborted = False

    async def __aiter__(self) -> AsyncIterator[Delta]:
        for d in self._deltas:
            if self.aborted:
                break
            yield Delta(d["reasoning"], d["content"])
            await asyncio.sleep(0)

    async def abort(self) -> None:
        self.aborted = True
        self._deltas.close()


class InProcessUpstream:
    """Drives a :class:`MockLLM` directly, skipping HTTP; records every request it sees."""

    def __init__(self, mock: MockLLM, behavior: MockBehavior | None = None):
        self.mock = mock
        self.behavior = behavior
        self.requests: list[dict] = []

    async def open(self, payload: dict) -> _IterStream:
        try:
            validate_request(payload)
        except MockMalformed as exc:
            raise UpstreamRejected(400, str(exc)) from exc
        self.requests.append(payload)
        return _IterStream(self.mock.generate(payload, self.behavior))
