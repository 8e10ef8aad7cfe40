"""Domain records and their wire encoding.

Every message between nodes travels as one LF-terminated line of UTF-8
JSON with the top-level keys ``msg_type``, ``sender_id``, ``seq`` and
``payload``. Payload field names match the record fields below, snake_case.

Code modules are content-addressed: the version identity of a module is
the md5 digest of its canonicalized source bytes, so the same logical
code hashes identically on every platform regardless of line endings.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import ParseError, ProtocolError, EncodingError, ValidationError
from .expression import BUILTIN_METHODS

INDEFINITE = "INDEFINITE"
CUSTOM = "CUSTOM"

MODULE_NAME_RE = re.compile(r"^[a-z0-9_]{1,64}$")
USER_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")
PARAM_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]{0,31}$")
SIGNATURE_RE = re.compile(r"^[0-9a-f]{32}$")


class MsgType:
    SUBMIT_ASSIGNMENT = "SUBMIT_ASSIGNMENT"
    DEPLOY_CODE = "DEPLOY_CODE"
    TASK = "TASK"
    CODE_PUSH = "CODE_PUSH"
    TASK_RESULT = "TASK_RESULT"
    CODE_ACK = "CODE_ACK"
    ASSIGNMENT_STATUS = "ASSIGNMENT_STATUS"
    ITERATION_OUTPUT = "ITERATION_OUTPUT"
    ERROR = "ERROR"
    REGISTER_CLIENT = "REGISTER_CLIENT"
    HEARTBEAT = "HEARTBEAT"


class State:
    ACCEPTED = "ACCEPTED"
    DEPLOYED = "DEPLOYED"
    RUNNING = "RUNNING"
    ITERATION_DISCARDED = "ITERATION_DISCARDED"
    COMPLETED = "COMPLETED"
    CANCELLED = "CANCELLED"
    FAILED = "FAILED"


TERMINAL_STATES = frozenset({State.COMPLETED, State.CANCELLED, State.FAILED})
ALL_STATES = frozenset(
    {
        State.ACCEPTED,
        State.DEPLOYED,
        State.RUNNING,
        State.ITERATION_DISCARDED,
        State.COMPLETED,
        State.CANCELLED,
        State.FAILED,
    }
)

DEPLOY_TARGETS = ("CLOUD", "CLIENTS", "BOTH")


def new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


def now_ms() -> int:
    return int(time.time() * 1000)


# ---------------------------------------------------------------------------
# Content addressing
# ---------------------------------------------------------------------------


def md5_hex(raw: bytes) -> str:
    """The md5 core: lowercase hex digest of raw bytes (RFC 1321)."""
    return hashlib.md5(raw).hexdigest()


def canonicalize(code: str) -> bytes:
    """Normalize source text to canonical UTF-8 bytes.

    CRLF and lone CR become LF, trailing whitespace is stripped from each
    line, and the result carries exactly one trailing LF. Idempotent.
    """
    text = code.replace("\r\n", "\n").replace("\r", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    body = "\n".join(lines).rstrip("\n")
    try:
        return (body + "\n").encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(f"code is not valid UTF-8 text: {exc}") from exc


def compute_signature(code: str) -> str:
    """md5 of the canonicalized code; the module's version identity."""
    return md5_hex(canonicalize(code))


def builtin_signature(keyword: str) -> str:
    """Reserved signature for non-custom methods, e.g. ``builtin:mean``."""
    return f"builtin:{keyword}"


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentSpec:
    assignment_id: str
    user_id: str
    method: str  # CUSTOM or a builtin keyword
    custom_module: str | None
    target_clients: tuple[str, ...]  # empty tuple = whole fleet
    iterations: int | str  # positive int or INDEFINITE
    window_size: int
    params: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.assignment_id:
            raise ValidationError("assignment_id must be non-empty", "assignment_id")
        _validate_user_id(self.user_id)
        if self.method != CUSTOM and self.method not in BUILTIN_METHODS:
            raise ValidationError(
                f"method must be CUSTOM or one of {sorted(BUILTIN_METHODS)}, "
                f"got {self.method!r}",
                "method",
            )
        if self.method == CUSTOM and not self.custom_module:
            raise ValidationError(
                "custom_module is required when method is CUSTOM", "custom_module"
            )
        if self.custom_module is not None and not MODULE_NAME_RE.match(self.custom_module):
            raise ValidationError(
                f"custom_module must match [a-z0-9_]{{1,64}}, got {self.custom_module!r}",
                "custom_module",
            )
        _validate_iterations(self.iterations)
        if not isinstance(self.window_size, int) or isinstance(self.window_size, bool) \
                or self.window_size < 1:
            raise ValidationError("window_size must be >= 1", "window_size")
        _validate_params(self.params)

    @property
    def is_indefinite(self) -> bool:
        return self.iterations == INDEFINITE


@dataclass(frozen=True)
class CodeModule:
    user_id: str
    name: str
    code: str
    signature: str
    deployed_at: int  # wall clock, ms since epoch

    @classmethod
    def create(cls, user_id: str, name: str, code: str, deployed_at: int | None = None) -> "CodeModule":
        return cls(
            user_id=user_id,
            name=name,
            code=code,
            signature=compute_signature(code),
            deployed_at=now_ms() if deployed_at is None else deployed_at,
        )

    def validate(self) -> None:
        _validate_user_id(self.user_id)
        if not MODULE_NAME_RE.match(self.name):
            raise ValidationError(
                f"module name must match [a-z0-9_]{{1,64}}, got {self.name!r}", "name"
            )
        if not SIGNATURE_RE.match(self.signature):
            raise ValidationError(
                f"signature must be 32 lowercase hex chars, got {self.signature!r}",
                "signature",
            )

    def verify_signature(self) -> bool:
        return compute_signature(self.code) == self.signature

    def with_fresh_timestamp(self) -> "CodeModule":
        return replace(self, deployed_at=now_ms())


@dataclass(frozen=True)
class CodeDeploymentSpec:
    deployment_id: str
    user_id: str
    target: str  # CLOUD | CLIENTS | BOTH
    target_clients: tuple[str, ...]  # empty = whole fleet; ignored for CLOUD
    module: CodeModule

    def validate(self) -> None:
        if not self.deployment_id:
            raise ValidationError("deployment_id must be non-empty", "deployment_id")
        _validate_user_id(self.user_id)
        if self.target not in DEPLOY_TARGETS:
            raise ValidationError(
                f"target must be one of {DEPLOY_TARGETS}, got {self.target!r}", "target"
            )
        self.module.validate()
        if self.module.user_id != self.user_id:
            raise ValidationError(
                "module.user_id must equal the deployment user_id", "module.user_id"
            )


@dataclass(frozen=True)
class TaskSpec:
    assignment_id: str
    task_id: str
    user_id: str
    client_id: str
    method: str
    custom_module: str | None
    window_size: int
    iterations: int | str
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def is_indefinite(self) -> bool:
        return self.iterations == INDEFINITE


@dataclass(frozen=True)
class ResultRecord:
    assignment_id: str
    client_id: str
    iteration: int  # 0-based
    value: float
    signature: str  # module md5, or builtin:<keyword>
    produced_at: int


@dataclass(frozen=True)
class StatusRecord:
    state: str
    detail: str
    assignment_id: str | None = None
    deployment_id: str | None = None

    def validate(self) -> None:
        if self.state not in ALL_STATES:
            raise ValidationError(f"unknown state {self.state!r}", "state")
        if not (self.assignment_id or self.deployment_id):
            raise ValidationError(
                "one of assignment_id or deployment_id is required", "assignment_id"
            )

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES


@dataclass(frozen=True)
class IterationOutput:
    assignment_id: str
    iteration: int
    accepted_signature: str
    accepted_count: int
    discarded_count: int
    value: float
    offboard_signature: str | None = None  # signature of the cloud-side reducer


@dataclass(frozen=True)
class CodePush:
    deployment_id: str
    module: CodeModule


@dataclass(frozen=True)
class CodeAck:
    deployment_id: str
    client_id: str
    user_id: str
    name: str
    signature: str


@dataclass(frozen=True)
class Registration:
    client_id: str


@dataclass(frozen=True)
class Heartbeat:
    pass


@dataclass(frozen=True)
class ErrorInfo:
    code: str
    message: str
    assignment_id: str | None = None
    client_id: str | None = None
    iteration: int | None = None
    module: str | None = None


@dataclass(frozen=True)
class Envelope:
    msg_type: str
    sender_id: str
    seq: int
    payload: Any


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def _validate_user_id(user_id: str) -> None:
    if not isinstance(user_id, str) or not USER_ID_RE.match(user_id):
        raise ValidationError(
            f"user_id must match [A-Za-z0-9_-]{{1,64}}, got {user_id!r}", "user_id"
        )


def _validate_iterations(iterations: Any) -> None:
    if iterations == INDEFINITE:
        return
    if isinstance(iterations, int) and not isinstance(iterations, bool) and iterations >= 1:
        return
    raise ValidationError(
        f"iterations must be a positive integer or {INDEFINITE!r}, got {iterations!r}",
        "iterations",
    )


def _validate_params(params: Mapping[str, Any]) -> None:
    for key, value in params.items():
        if not isinstance(key, str) or not PARAM_KEY_RE.match(key):
            raise ValidationError(f"bad parameter key {key!r}", "params")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(
                f"parameter {key!r} must be a number, got {value!r}", "params"
            )


# ---------------------------------------------------------------------------
# Task derivation
# ---------------------------------------------------------------------------


def derive_tasks(spec: AssignmentSpec, fleet: Sequence[str]) -> list[TaskSpec]:
    """Project an assignment onto its targeted clients, one task each.

    An empty target list means the whole fleet. Unknown targets are an
    error that names every offending id.
    """
    if not fleet:
        raise ValidationError("fleet is empty; nothing to target", "target_clients")
    fleet_set = set(fleet)
    if spec.target_clients:
        unknown = [c for c in spec.target_clients if c not in fleet_set]
        if unknown:
            raise ValidationError(
                f"unknown client ids: {', '.join(sorted(unknown))}", "target_clients"
            )
        targets: Iterable[str] = spec.target_clients
    else:
        targets = fleet
    return [
        TaskSpec(
            assignment_id=spec.assignment_id,
            task_id=f"{spec.assignment_id}:{client_id}",
            user_id=spec.user_id,
            client_id=client_id,
            method=spec.method,
            custom_module=spec.custom_module,
            window_size=spec.window_size,
            iterations=spec.iterations,
            params=dict(spec.params),
        )
        for client_id in targets
    ]


# ---------------------------------------------------------------------------
# Wire codec
# ---------------------------------------------------------------------------


class _Reader:
    """Pulls typed fields out of a decoded payload dict, naming offenders."""

    def __init__(self, msg_type: str, data: Any):
        if not isinstance(data, dict):
            raise ValidationError(f"{msg_type} payload must be an object", "payload")
        self.msg_type = msg_type
        self.data = data
        self.seen: set[str] = set()

    def _fail(self, name: str, why: str):
        raise ValidationError(f"{self.msg_type}.{name}: {why}", name)

    def string(self, name: str) -> str:
        value = self._require(name)
        if not isinstance(value, str):
            self._fail(name, f"expected a string, got {type(value).__name__}")
        return value

    def opt_string(self, name: str) -> str | None:
        if name not in self.data or self.data[name] is None:
            self.seen.add(name)
            return None
        return self.string(name)

    def integer(self, name: str) -> int:
        value = self._require(name)
        if isinstance(value, bool) or not isinstance(value, int):
            self._fail(name, f"expected an integer, got {value!r}")
        return value

    def opt_integer(self, name: str) -> int | None:
        if name not in self.data or self.data[name] is None:
            self.seen.add(name)
            return None
        return self.integer(name)

    def number(self, name: str) -> float:
        value = self._require(name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self._fail(name, f"expected a number, got {value!r}")
        return float(value)

    def iterations(self, name: str = "iterations") -> int | str:
        value = self._require(name)
        if value == INDEFINITE:
            return INDEFINITE
        if isinstance(value, bool) or not isinstance(value, int):
            self._fail(name, f"expected a positive integer or {INDEFINITE!r}, got {value!r}")
        return value

    def string_list(self, name: str) -> tuple[str, ...]:
        value = self._require(name)
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            self._fail(name, f"expected a list of strings, got {value!r}")
        return tuple(value)

    def number_map(self, name: str) -> dict[str, float]:
        value = self._require(name)
        if not isinstance(value, dict):
            self._fail(name, f"expected an object, got {value!r}")
        out: dict[str, float] = {}
        for key, item in value.items():
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                self._fail(name, f"value for {key!r} must be a number, got {item!r}")
            out[key] = float(item)
        return out

    def nested(self, name: str) -> "_Reader":
        value = self._require(name)
        return _Reader(f"{self.msg_type}.{name}", value)

    def _require(self, name: str) -> Any:
        if name not in self.data:
            self._fail(name, "required field is missing")
        self.seen.add(name)
        return self.data[name]

    def finish(self) -> None:
        extra = set(self.data) - self.seen
        if extra:
            self._fail(sorted(extra)[0], "unexpected field")


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _module_to_wire(m: CodeModule) -> dict:
    return {
        "user_id": m.user_id,
        "name": m.name,
        "code": m.code,
        "signature": m.signature,
        "deployed_at": m.deployed_at,
    }


def _module_from_reader(r: _Reader) -> CodeModule:
    module = CodeModule(
        user_id=r.string("user_id"),
        name=r.string("name"),
        code=r.string("code"),
        signature=r.string("signature"),
        deployed_at=r.integer("deployed_at"),
    )
    r.finish()
    return module


def _assignment_to_wire(s: AssignmentSpec) -> dict:
    return _drop_none(
        {
            "assignment_id": s.assignment_id,
            "user_id": s.user_id,
            "method": s.method,
            "custom_module": s.custom_module,
            "target_clients": list(s.target_clients),
            "iterations": s.iterations,
            "window_size": s.window_size,
            "params": dict(s.params),
        }
    )


def _assignment_from_reader(r: _Reader) -> AssignmentSpec:
    spec = AssignmentSpec(
        assignment_id=r.string("assignment_id"),
        user_id=r.string("user_id"),
        method=r.string("method"),
        custom_module=r.opt_string("custom_module"),
        target_clients=r.string_list("target_clients"),
        iterations=r.iterations(),
        window_size=r.integer("window_size"),
        params=r.number_map("params"),
    )
    r.finish()
    return spec


def _encode_payload(msg_type: str, payload: Any) -> dict:
    if msg_type == MsgType.SUBMIT_ASSIGNMENT:
        return _assignment_to_wire(payload)
    if msg_type == MsgType.DEPLOY_CODE:
        return {
            "deployment_id": payload.deployment_id,
            "user_id": payload.user_id,
            "target": payload.target,
            "target_clients": list(payload.target_clients),
            "module": _module_to_wire(payload.module),
        }
    if msg_type == MsgType.TASK:
        return _drop_none(
            {
                "assignment_id": payload.assignment_id,
                "task_id": payload.task_id,
                "user_id": payload.user_id,
                "client_id": payload.client_id,
                "method": payload.method,
                "custom_module": payload.custom_module,
                "window_size": payload.window_size,
                "iterations": payload.iterations,
                "params": dict(payload.params),
            }
        )
    if msg_type == MsgType.CODE_PUSH:
        return {
            "deployment_id": payload.deployment_id,
            "module": _module_to_wire(payload.module),
        }
    if msg_type == MsgType.TASK_RESULT:
        return {
            "assignment_id": payload.assignment_id,
            "client_id": payload.client_id,
            "iteration": payload.iteration,
            "value": payload.value,
            "signature": payload.signature,
            "produced_at": payload.produced_at,
        }
    if msg_type == MsgType.CODE_ACK:
        return {
            "deployment_id": payload.deployment_id,
            "client_id": payload.client_id,
            "user_id": payload.user_id,
            "name": payload.name,
            "signature": payload.signature,
        }
    if msg_type == MsgType.ASSIGNMENT_STATUS:
        return _drop_none(
            {
                "assignment_id": payload.assignment_id,
                "deployment_id": payload.deployment_id,
                "state": payload.state,
                "detail": payload.detail,
            }
        )
    if msg_type == MsgType.ITERATION_OUTPUT:
        return _drop_none(
            {
                "assignment_id": payload.assignment_id,
                "iteration": payload.iteration,
                "accepted_signature": payload.accepted_signature,
                "accepted_count": payload.accepted_count,
                "discarded_count": payload.discarded_count,
                "value": payload.value,
                "offboard_signature": payload.offboard_signature,
            }
        )
    if msg_type == MsgType.ERROR:
        return _drop_none(
            {
                "code": payload.code,
                "message": payload.message,
                "assignment_id": payload.assignment_id,
                "client_id": payload.client_id,
                "iteration": payload.iteration,
                "module": payload.module,
            }
        )
    if msg_type == MsgType.REGISTER_CLIENT:
        return {"client_id": payload.client_id}
    if msg_type == MsgType.HEARTBEAT:
        return {}
    raise ProtocolError(f"unknown msg_type {msg_type!r}")


def _decode_payload(msg_type: str, data: Any) -> Any:
    r = _Reader(msg_type, data)
    if msg_type == MsgType.SUBMIT_ASSIGNMENT:
        return _assignment_from_reader(r)
    if msg_type == MsgType.DEPLOY_CODE:
        spec = CodeDeploymentSpec(
            deployment_id=r.string("deployment_id"),
            user_id=r.string("user_id"),
            target=r.string("target"),
            target_clients=r.string_list("target_clients"),
            module=_module_from_reader(r.nested("module")),
        )
        r.finish()
        return spec
    if msg_type == MsgType.TASK:
        task = TaskSpec(
            assignment_id=r.string("assignment_id"),
            task_id=r.string("task_id"),
            user_id=r.string("user_id"),
            client_id=r.string("client_id"),
            method=r.string("method"),
            custom_module=r.opt_string("custom_module"),
            window_size=r.integer("window_size"),
            iterations=r.iterations(),
            params=r.number_map("params"),
        )
        r.finish()
        return task
    if msg_type == MsgType.CODE_PUSH:
        push = CodePush(
            deployment_id=r.string("deployment_id"),
            module=_module_from_reader(r.nested("module")),
        )
        r.finish()
        return push
    if msg_type == MsgType.TASK_RESULT:
        rec = ResultRecord(
            assignment_id=r.string("assignment_id"),
            client_id=r.string("client_id"),
            iteration=r.integer("iteration"),
            value=r.number("value"),
            signature=r.string("signature"),
            produced_at=r.integer("produced_at"),
        )
        r.finish()
        return rec
    if msg_type == MsgType.CODE_ACK:
        ack = CodeAck(
            deployment_id=r.string("deployment_id"),
            client_id=r.string("client_id"),
            user_id=r.string("user_id"),
            name=r.string("name"),
            signature=r.string("signature"),
        )
        r.finish()
        return ack
    if msg_type == MsgType.ASSIGNMENT_STATUS:
        status = StatusRecord(
            assignment_id=r.opt_string("assignment_id"),
            deployment_id=r.opt_string("deployment_id"),
            state=r.string("state"),
            detail=r.string("detail"),
        )
        r.finish()
        status.validate()
        return status
    if msg_type == MsgType.ITERATION_OUTPUT:
        out = IterationOutput(
            assignment_id=r.string("assignment_id"),
            iteration=r.integer("iteration"),
            accepted_signature=r.string("accepted_signature"),
            accepted_count=r.integer("accepted_count"),
            discarded_count=r.integer("discarded_count"),
            value=r.number("value"),
            offboard_signature=r.opt_string("offboard_signature"),
        )
        r.finish()
        return out
    if msg_type == MsgType.ERROR:
        info = ErrorInfo(
            code=r.string("code"),
            message=r.string("message"),
            assignment_id=r.opt_string("assignment_id"),
            client_id=r.opt_string("client_id"),
            iteration=r.opt_integer("iteration"),
            module=r.opt_string("module"),
        )
        r.finish()
        return info
    if msg_type == MsgType.REGISTER_CLIENT:
        reg = Registration(client_id=r.string("client_id"))
        r.finish()
        return reg
    if msg_type == MsgType.HEARTBEAT:
        r.finish()
        return Heartbeat()
    raise ProtocolError(f"unknown msg_type {msg_type!r}")


# Public names for callers (e.g. the HTTP gateway) that encode or decode
# bare payloads using the same schemas as the envelope codec.
def encode_payload(msg_type: str, payload: Any) -> dict:
    return _encode_payload(msg_type, payload)


def decode_payload(msg_type: str, data: Any) -> Any:
    return _decode_payload(msg_type, data)


def encode_envelope(env: Envelope) -> bytes:
    """One LF-terminated line of JSON; newlines in code text are escaped."""
    body = {
        "msg_type": env.msg_type,
        "sender_id": env.sender_id,
        "seq": env.seq,
        "payload": _encode_payload(env.msg_type, env.payload),
    }
    try:
        line = json.dumps(body, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"payload is not encodable: {exc}", "payload") from exc
    return line.encode("utf-8") + b"\n"


def decode_envelope(line: bytes | str) -> Envelope:
    """Decode one line into an Envelope, rejecting anything off-schema."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"line is not valid UTF-8: {exc}") from exc
    try:
        body = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise ParseError("envelope must be a JSON object")
    top = _Reader("envelope", body)
    msg_type = top.string("msg_type")
    sender_id = top.string("sender_id")
    seq = top.integer("seq")
    if "payload" not in body:
        raise ValidationError("envelope.payload: required field is missing", "payload")
    top.seen.add("payload")
    top.finish()
    payload = _decode_payload(msg_type, body["payload"])
    return Envelope(msg_type=msg_type, sender_id=sender_id, seq=seq, payload=payload)
