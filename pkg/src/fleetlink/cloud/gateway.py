"""HTTP and WebSocket gateway: the user-facing surface of the cloud node.

Each authenticated user id gets a logical session; live iteration outputs
and status records for that user flow over ``GET /stream?user_id=``.
All mutations performed by the CLI and the dashboard go through the
endpoints here, so both front-ends observe identical behavior.
"""

from __future__ import annotations

import asyncio
import json
import logging
import queue
from pathlib import Path

from fastapi import Body, FastAPI, WebSocket
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from starlette.concurrency import run_in_threadpool
from starlette.requests import Request

from ..config import FleetConfig
from ..errors import (
    EncodingError,
    FleetError,
    IntegrityError,
    NotFoundError,
    ParseError,
    ProtocolError,
    ValidationError,
)
from ..protocol import (
    MsgType,
    compute_signature,
    decode_payload,
    encode_payload,
    new_id,
    now_ms,
)
from .node import CLOSE_SENTINEL, CloudNode

log = logging.getLogger(__name__)

_BAD_REQUEST = (ValidationError, IntegrityError, ParseError, ProtocolError, EncodingError)


def build_app(node: CloudNode, config: FleetConfig) -> FastAPI:
    app = FastAPI(title="fleetlink gateway", version="0.1.0")

    @app.exception_handler(FleetError)
    async def fleet_error_handler(request: Request, exc: FleetError):
        if isinstance(exc, NotFoundError):
            status = 404
        elif isinstance(exc, _BAD_REQUEST):
            status = 400
        else:
            status = 500
        body = {"error": {"code": exc.code, "message": str(exc)}}
        field = getattr(exc, "field", None)
        if field:
            body["error"]["field"] = field
        return JSONResponse(status_code=status, content=body)

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.get("/clients")
    def clients():
        return {"clients": node.registry_snapshot()}

    @app.post("/assignments")
    def submit_assignment(body: dict = Body(...)):
        body.setdefault("assignment_id", new_id("a"))
        body.setdefault("target_clients", [])
        body.setdefault("params", {})
        spec = decode_payload(MsgType.SUBMIT_ASSIGNMENT, body)
        node.ingest_assignment(spec)
        return {"assignment_id": spec.assignment_id}

    @app.post("/modules")
    def deploy_module(body: dict = Body(...)):
        body.setdefault("deployment_id", new_id("d"))
        body.setdefault("target_clients", [])
        module = body.get("module")
        if isinstance(module, dict):
            module.setdefault("deployed_at", now_ms())
            if "signature" not in module and isinstance(module.get("code"), str):
                # Browser clients cannot compute md5 locally; fill it in
                # from the same bytes the store will verify against.
                module["signature"] = compute_signature(module["code"])
        spec = decode_payload(MsgType.DEPLOY_CODE, body)
        status = node.deploy(spec)
        return encode_payload(MsgType.ASSIGNMENT_STATUS, status)

    @app.get("/assignments/{assignment_id}")
    def assignment_detail(assignment_id: str):
        snapshot = node.assignment_snapshot(assignment_id)
        return {
            "assignment_id": snapshot["assignment_id"],
            "state": snapshot["state"],
            "outputs": [
                encode_payload(MsgType.ITERATION_OUTPUT, out)
                for out in snapshot["outputs"]
            ],
            "statuses": [
                encode_payload(MsgType.ASSIGNMENT_STATUS, st)
                for st in snapshot["statuses"]
            ],
        }

    @app.post("/assignments/{assignment_id}/cancel")
    def cancel_assignment(assignment_id: str):
        status = node.cancel_assignment(assignment_id)
        return encode_payload(MsgType.ASSIGNMENT_STATUS, status)

    if config.fault_injection:

        @app.post("/_fault/delays")
        def set_fault_delays(body: dict = Body(...)):
            delays = body.get("delays")
            if not isinstance(delays, dict):
                raise ValidationError("body must carry a 'delays' object", "delays")
            node.set_fault_delays({str(k): float(v) for k, v in delays.items()})
            return {"ok": True, "delays": delays}

    @app.websocket("/stream")
    async def stream(websocket: WebSocket, user_id: str, assignment_id: str | None = None):
        await websocket.accept()
        sink = await run_in_threadpool(node.subscribe, user_id, assignment_id)
        disconnected = asyncio.Event()

        async def watch_disconnect():
            try:
                while True:
                    message = await websocket.receive()
                    if message["type"] == "websocket.disconnect":
                        break
            except Exception:
                pass
            disconnected.set()

        watcher = asyncio.create_task(watch_disconnect())
        seq = 0
        try:
            while not disconnected.is_set():
                try:
                    item = await run_in_threadpool(sink.get, True, 0.5)
                except queue.Empty:
                    continue
                if item == CLOSE_SENTINEL:
                    break
                msg_type, payload = item
                seq += 1
                frame = {
                    "msg_type": msg_type,
                    "sender_id": "cloud",
                    "seq": seq,
                    "payload": encode_payload(msg_type, payload),
                }
                await websocket.send_text(json.dumps(frame, separators=(",", ":")))
        except Exception:
            pass
        finally:
            watcher.cancel()
            node.unsubscribe(sink)
            try:
                await websocket.close()
            except Exception:
                pass

    ui_root = config.ui_root
    if ui_root and Path(ui_root).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_root, html=True), name="ui")
        log.info("serving dashboard from %s at /ui", ui_root)

    return app
