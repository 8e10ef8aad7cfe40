"""The analyst's command-line front-end.

Validates assignment specs and custom code locally before anything touches
the network, submits work to the gateway, deploys modules, and streams
live iteration outputs.

Exit codes: 0 ok, 1 validation or remote failure, 2 file I/O error,
3 gateway unreachable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Iterator

import requests

from .errors import FleetError, NetworkError, ValidationError
from .expression import validate_code
from .protocol import (
    CUSTOM,
    MsgType,
    State,
    TERMINAL_STATES,
    compute_signature,
    decode_payload,
    now_ms,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 2
EXIT_NETWORK = 3

DEFAULT_GATEWAY = os.environ.get("FLEET_GATEWAY", "127.0.0.1:9200")


class RemoteError(FleetError):
    """The gateway rejected a request."""

    code = "remote_error"


class HttpGateway:
    """Gateway client over HTTP and WebSocket."""

    def __init__(self, address: str):
        self.address = address
        self.base = f"http://{address}"

    def _request(self, method: str, path: str, body: dict | None = None) -> Any:
        try:
            response = requests.request(method, self.base + path, json=body, timeout=180)
        except requests.exceptions.RequestException as exc:
            raise NetworkError(f"gateway {self.address} unreachable: {exc}") from exc
        if response.status_code >= 400:
            try:
                error = response.json().get("error", {})
                message = error.get("message", response.text)
            except ValueError:
                message = response.text
            raise RemoteError(f"{response.status_code}: {message}")
        return response.json()

    def submit(self, payload: dict) -> dict:
        return self._request("POST", "/assignments", payload)

    def deploy(self, payload: dict) -> dict:
        return self._request("POST", "/modules", payload)

    def clients(self) -> list[dict]:
        return self._request("GET", "/clients")["clients"]

    def cancel(self, assignment_id: str) -> dict:
        return self._request("POST", f"/assignments/{assignment_id}/cancel")

    def assignment(self, assignment_id: str) -> dict:
        return self._request("GET", f"/assignments/{assignment_id}")

    def stream(self, user_id: str, assignment_id: str | None = None) -> Iterator[dict]:
        from websockets.sync.client import connect as ws_connect
        from websockets.exceptions import WebSocketException

        url = f"ws://{self.address}/stream?user_id={user_id}"
        if assignment_id:
            url += f"&assignment_id={assignment_id}"
        try:
            with ws_connect(url, open_timeout=10) as ws:
                while True:
                    yield json.loads(ws.recv())
        except (WebSocketException, OSError) as exc:
            raise NetworkError(f"stream from {self.address} failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Local validation (no network I/O)
# ---------------------------------------------------------------------------


def load_assignment_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read assignment file {path}: {exc}") from exc
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")
    if not isinstance(body, dict):
        raise ValidationError(f"{path} must hold a JSON object")
    return body


def validate_assignment_document(body: dict, base_dir: Path) -> list[str]:
    """All diagnostics for an assignment document, empty when clean."""
    diagnostics: list[str] = []
    doc = dict(body)
    code_file = doc.pop("code_file", None)
    doc.setdefault("assignment_id", "a-local-check")
    doc.setdefault("target_clients", [])
    doc.setdefault("params", {})
    try:
        spec = decode_payload(MsgType.SUBMIT_ASSIGNMENT, doc)
        spec.validate()
    except FleetError as exc:
        field = getattr(exc, "field", None)
        prefix = f"{field}: " if field else ""
        diagnostics.append(f"{prefix}{exc}")
    if code_file is not None:
        try:
            code = (base_dir / code_file).read_text(encoding="utf-8")
        except OSError as exc:
            diagnostics.append(f"code_file: cannot read {code_file}: {exc}")
        else:
            diagnostics.extend(
                f"{code_file}:{d}" for d in validate_code(code)
            )
    return diagnostics


def build_module_payload(user_id: str, name: str, code: str) -> dict:
    return {
        "user_id": user_id,
        "name": name,
        "code": code,
        "signature": compute_signature(code),
        "deployed_at": now_ms(),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate(args, gateway_factory, out) -> int:
    try:
        body = load_assignment_file(args.path)
    except OSError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_FAILURE
    diagnostics = validate_assignment_document(body, Path(args.path).parent)
    for diagnostic in diagnostics:
        print(f"error: {diagnostic}", file=out)
    if diagnostics:
        return EXIT_FAILURE
    print("ok", file=out)
    return EXIT_OK


def cmd_submit(args, gateway_factory, out) -> int:
    try:
        body = load_assignment_file(args.path)
    except OSError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_FAILURE
    base_dir = Path(args.path).parent
    diagnostics = validate_assignment_document(body, base_dir)
    if diagnostics:
        for diagnostic in diagnostics:
            print(f"error: {diagnostic}", file=out)
        return EXIT_FAILURE

    payload = dict(body)
    code_file = payload.pop("code_file", None)
    payload.setdefault("target_clients", [])
    payload.setdefault("params", {})
    gateway = gateway_factory(args.gateway)
    if code_file is not None and payload.get("method") == CUSTOM:
        code = (base_dir / code_file).read_text(encoding="utf-8")
        module_payload = build_module_payload(
            payload["user_id"], payload["custom_module"], code
        )
        status = gateway.deploy(
            {
                "user_id": payload["user_id"],
                "target": "BOTH",
                "target_clients": payload.get("target_clients", []),
                "module": module_payload,
            }
        )
        print(f"deployed {module_payload['signature']} ({status['state']})", file=out)
        if status["state"] != State.DEPLOYED:
            print(f"error: inline deployment failed: {status['detail']}", file=out)
            return EXIT_FAILURE
    result = gateway.submit(payload)
    print(result["assignment_id"], file=out)
    return EXIT_OK


def cmd_deploy(args, gateway_factory, out) -> int:
    try:
        code = Path(args.code_path).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.code_path}: {exc}", file=out)
        return EXIT_IO
    diagnostics = validate_code(code)
    if diagnostics:
        for diagnostic in diagnostics:
            print(f"error: {args.code_path}:{diagnostic}", file=out)
        return EXIT_FAILURE
    module = build_module_payload(args.user, args.name, code)
    payload = {
        "user_id": args.user,
        "target": args.target.upper(),
        "target_clients": list(args.clients or []),
        "module": module,
    }
    gateway = gateway_factory(args.gateway)
    status = gateway.deploy(payload)
    print(f"{status['state']} {module['signature']}", file=out)
    if status["state"] != State.DEPLOYED:
        print(f"error: {status['detail']}", file=out)
        return EXIT_FAILURE
    return EXIT_OK


def format_output_line(payload: dict) -> str:
    return (
        f"iteration={payload['iteration']} "
        f"value={payload['value']:.6f} "
        f"signature={payload['accepted_signature']} "
        f"discarded={payload['discarded_count']}"
    )


def cmd_watch(args, gateway_factory, out) -> int:
    gateway = gateway_factory(args.gateway)
    for envelope in gateway.stream(args.user, args.assignment_id):
        msg_type = envelope.get("msg_type")
        payload = envelope.get("payload", {})
        if msg_type == MsgType.ITERATION_OUTPUT:
            print(format_output_line(payload), file=out)
        elif msg_type == MsgType.ASSIGNMENT_STATUS:
            state = payload.get("state")
            if state in TERMINAL_STATES:
                print(state, file=out)
                return EXIT_OK if state != State.FAILED else EXIT_FAILURE
            if state == State.ITERATION_DISCARDED:
                print(f"# {payload.get('detail', state)}", file=out)
        elif msg_type == MsgType.ERROR:
            print(f"# error: {payload.get('message')}", file=out)
    return EXIT_FAILURE  # stream ended without a terminal status


def cmd_cancel(args, gateway_factory, out) -> int:
    gateway = gateway_factory(args.gateway)
    status = gateway.cancel(args.assignment_id)
    print(status["state"], file=out)
    return EXIT_OK


def cmd_clients(args, gateway_factory, out) -> int:
    gateway = gateway_factory(args.gateway)
    rows = gateway.clients()
    for row in rows:
        flag = "connected" if row.get("connected") else "disconnected"
        print(f"{row['client_id']}\t{flag}\t{row.get('address', '')}", file=out)
    if not rows:
        print("(no clients registered)", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleet", description=__doc__)
    parser.add_argument(
        "--gateway", default=DEFAULT_GATEWAY,
        help="gateway address host:port (env FLEET_GATEWAY)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate an assignment file locally")
    p.add_argument("path")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("submit", help="submit an assignment")
    p.add_argument("path")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("deploy", help="deploy a computation module")
    p.add_argument("code_path")
    p.add_argument("--name", required=True, help="module name")
    p.add_argument("--user", required=True, help="owner user id")
    p.add_argument("--target", default="both", choices=["cloud", "clients", "both"])
    p.add_argument("--clients", nargs="*", default=None, help="target client ids (default: whole fleet)")
    p.set_defaults(fn=cmd_deploy)

    p = sub.add_parser("watch", help="stream live outputs of an assignment")
    p.add_argument("assignment_id")
    p.add_argument("--user", required=True, help="owner user id")
    p.set_defaults(fn=cmd_watch)

    p = sub.add_parser("cancel", help="cancel a running assignment")
    p.add_argument("assignment_id")
    p.set_defaults(fn=cmd_cancel)

    p = sub.add_parser("clients", help="list registered fleet clients")
    p.set_defaults(fn=cmd_clients)
    return parser


def main(argv: list[str] | None = None, gateway_factory=HttpGateway, out=None) -> int:
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args, gateway_factory, out)
    except NetworkError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_NETWORK
    except RemoteError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_FAILURE
    except FleetError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
