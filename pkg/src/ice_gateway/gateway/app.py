"""HTTP front end: chat completions plus the admin endpoints."""

from __future__ import annotations

import json
import logging
import time
import uuid

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from ice_gateway.control_store import StoreFormatError
from ice_gateway.errors import IceError, PolicyInvalid
from ice_gateway.gateway.core import (
    ClientEvent,
    Gateway,
    MalformedRequest,
    SessionBusy,
    SessionNotFound,
)
from ice_gateway.gateway.upstream import UpstreamError
from ice_gateway.transcript import EmptyTranscript

logger = logging.getLogger(__name__)

SESSION_HEADER = "X-ICE-Session"

_STATUS = [
    (MalformedRequest, 400, "malformed_request"),
    (SessionNotFound, 404, "session_not_found"),
    (EmptyTranscript, 404, "empty_transcript"),
    (SessionBusy, 409, "session_busy"),
    (PolicyInvalid, 422, "policy_invalid"),
    (StoreFormatError, 422, "control_store_invalid"),
    (UpstreamError, 502, "upstream_unreachable"),
]


def error_response(exc: Exception, headers: dict | None = None) -> JSONResponse:
    for cls, status, kind in _STATUS:
        if isinstance(exc, cls):
            break
    else:
        status, kind = 502 if isinstance(exc, IceError) else 500, "gateway_error"
    return JSONResponse({"error": {"type": kind, "message": str(exc)}}, status_code=status, headers=headers)


def event_chunk(ev: ClientEvent, chunk_id: str, model: str) -> dict:
    if ev.kind == "ice":
        delta = {"ice_control": ev.text}
        extra = {"ice": {"splice_point": ev.splice_point}}
    else:
        delta = {"reasoning_content" if ev.kind == "reasoning" else "content": ev.text}
        extra = {}
    return {
        "id": chunk_id,
        "object": "chat.completion.chunk",
        "created": int(time.time()),
        "model": model,
        "choices": [{"index": 0, "delta": delta, "finish_reason": None}],
        **extra,
    }


def _sse(obj) -> str:
    return f"data: {json.dumps(obj, ensure_ascii=False)}\n\n"


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="ice gateway")
    app.state.gateway = gateway

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        session_id = request.headers.get(SESSION_HEADER)
        try:
            try:
                body = await request.json()
            except ValueError:
                raise MalformedRequest("request body is not valid JSON") from None
            if not (isinstance(body, dict) and body.get("stream") is True):
                session, payload = await gateway.chat(body, session_id)
                return JSONResponse(payload, headers={SESSION_HEADER: session.id})
            session, events = await gateway.open_chat(body, session_id)
        except IceError as exc:
            return error_response(exc, {SESSION_HEADER: session_id} if session_id else None)

        chunk_id = f"icechunk-{uuid.uuid4().hex[:24]}"

        async def body_iter():
            async for ev in events:
                if ev.kind == "error":
                    yield _sse({"error": {"type": "continuation_failed", "message": ev.text}})
                    break
                yield _sse(event_chunk(ev, chunk_id, gateway.model))
            else:
                yield _sse({"id": chunk_id, "object": "chat.completion.chunk", "model": gateway.model,
                            "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}]})
            yield "data: [DONE]\n\n"

        return StreamingResponse(body_iter(), media_type="text/event-stream",
                                 headers={SESSION_HEADER: session.id})

    @app.get("/admin/sessions/{session_id}/report")
    async def session_report(session_id: str):
        try:
            return gateway.report(session_id).to_json()
        except IceError as exc:
            return error_response(exc)

    @app.post("/admin/reload")
    async def reload_store():
        try:
            return {"sentences": gateway.reload_store()}
        except IceError as exc:
            return error_response(exc)

    @app.get("/healthz")
    async def health():
        return {"status": "ok", "sessions": len(gateway.sessions)}

    return app
