"""The permanent cloud node: fleet registry, handler table, user streams.

Concurrency model: a single router thread owns the registry, the handler
tables, the assignment archive, and the stream subscriptions. Everything
else (client reader threads, gateway worker threads, handler threads)
interacts with that state by posting closures to the router's inbox, or
through small read-mostly mirrors guarded by one lock. Handlers run on
their own threads and exchange messages with the router, never memory.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from ..config import FleetConfig
from ..errors import (
    FleetError,
    IntegrityError,
    NetworkError,
    NotFoundError,
    ValidationError,
)
from ..expression import validate_code
from ..modstore import ModuleStore
from ..netio import LineConnection
from ..protocol import (
    CUSTOM,
    AssignmentSpec,
    CodeDeploymentSpec,
    Envelope,
    ErrorInfo,
    IterationOutput,
    MsgType,
    StatusRecord,
    State,
    TERMINAL_STATES,
    derive_tasks,
    now_ms,
)
from .handlers import AssignmentHandler, DeploymentHandler, HandlerServices

log = logging.getLogger(__name__)

MISSED_HEARTBEATS_LIMIT = 3
_SWEEP_INTERVAL_S = 0.25
CLOSE_SENTINEL = ("__close__", None)


@dataclass
class ClientInfo:
    client_id: str
    address: str
    last_heartbeat: int
    connected: bool
    session: "ClientSession | None" = None

    def snapshot(self) -> dict:
        return {
            "client_id": self.client_id,
            "address": self.address,
            "connected": self.connected,
            "last_heartbeat": self.last_heartbeat,
        }


@dataclass
class AssignmentRecord:
    spec: AssignmentSpec
    state: str = State.ACCEPTED
    events: list[tuple[str, Any]] = field(default_factory=list)

    def outputs(self) -> list[IterationOutput]:
        return [p for t, p in self.events if t == MsgType.ITERATION_OUTPUT]

    def statuses(self) -> list[StatusRecord]:
        return [p for t, p in self.events if t == MsgType.ASSIGNMENT_STATUS]


@dataclass
class _Subscription:
    user_id: str
    assignment_id: str | None
    sink: queue.Queue


class ClientSession(threading.Thread):
    """Reader thread for one client connection."""

    def __init__(self, node: "CloudNode", conn: LineConnection):
        super().__init__(name=f"session-{conn.peer}", daemon=True)
        self.node = node
        self.conn = conn
        self.client_id: str | None = None

    def run(self) -> None:
        while True:
            try:
                env = self.conn.recv()
            except NetworkError:
                break
            except FleetError as exc:
                log.warning("bad line from %s dropped: %s", self.conn.peer, exc)
                continue
            if env is None:
                break
            self.node._post(lambda e=env: self.node._on_envelope(self, e))
        self.node._post(lambda: self.node._on_session_eof(self))


class CloudNode:
    def __init__(self, config: FleetConfig, host: str = "127.0.0.1"):
        self.config = config
        self.host = host
        self.store = ModuleStore(config.module_root)
        self.client_port = config.client_port

        self._inbox: queue.Queue = queue.Queue()
        self._stopping = threading.Event()
        self._router: threading.Thread | None = None
        self._listener: threading.Thread | None = None
        self._listen_sock: socket.socket | None = None

        # Router-owned state. Touch only from the router thread.
        self._registry: dict[str, ClientInfo] = {}
        self._assignment_handlers: dict[str, AssignmentHandler] = {}
        self._deployment_handlers: dict[str, DeploymentHandler] = {}
        self._archive: dict[str, AssignmentRecord] = {}
        self._subscriptions: list[_Subscription] = []
        self._client_pushes: set[tuple[str, str]] = set()
        self._deployment_users: dict[str, str] = {}

        # Read-mostly mirrors for handler threads.
        self._mirror_lock = threading.Lock()
        self._conns: dict[str, LineConnection] = {}
        self._known_sigs: dict[tuple[str, str], str] = {}
        self._fault_delays: dict[str, float] = {}

        self._services = HandlerServices(
            send_to_client=self._send_to_client,
            emit_status=lambda st: self._post(lambda: self._record_status(st)),
            emit_output=lambda out: self._post(lambda: self._record_output(out)),
            emit_error=lambda user, err: self._post(lambda: self._record_error(user, err)),
            current_signature=self._current_signature,
            on_finished=self._handler_finished,
            cloud_store=self.store,
            iteration_timeout_s=config.iteration_timeout_ms / 1000.0,
            ack_timeout_s=config.ack_timeout_ms / 1000.0,
        )

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.config.client_port))
        sock.listen(64)
        sock.settimeout(0.5)
        self._listen_sock = sock
        self.client_port = sock.getsockname()[1]

        self._router = threading.Thread(target=self._router_loop, name="cloud-router", daemon=True)
        self._router.start()
        self._listener = threading.Thread(target=self._accept_loop, name="cloud-listener", daemon=True)
        self._listener.start()
        log.info("cloud node listening for clients on %s:%d", self.host, self.client_port)

    def stop(self) -> None:
        self._stopping.set()
        if self._listen_sock is not None:
            try:
                self._listen_sock.close()
            except OSError:
                pass
        handlers = self._call(
            lambda: list(self._assignment_handlers.values())
            + list(self._deployment_handlers.values())
        )
        for handler in handlers:
            handler.submit(("stop", None))
        for handler in handlers:
            handler.join(timeout=2.0)
        with self._mirror_lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.close()
        self._call(self._close_subscriptions)
        self._inbox.put(None)
        if self._router is not None:
            self._router.join(timeout=2.0)
        if self._listener is not None:
            self._listener.join(timeout=2.0)

    def _close_subscriptions(self) -> None:
        for sub in self._subscriptions:
            sub.sink.put(CLOSE_SENTINEL)
        self._subscriptions.clear()

    # ------------------------------------------------------------------
    # Router plumbing
    # ------------------------------------------------------------------

    def _post(self, fn: Callable[[], None]) -> None:
        self._inbox.put(fn)

    def _call(self, fn: Callable[[], Any], timeout: float = 10.0) -> Any:
        reply: queue.Queue = queue.Queue(1)

        def run() -> None:
            try:
                reply.put(("ok", fn()))
            except BaseException as exc:  # propagated to the caller
                reply.put(("err", exc))

        self._inbox.put(run)
        status, value = reply.get(timeout=timeout)
        if status == "err":
            raise value
        return value

    def _router_loop(self) -> None:
        last_sweep = time.monotonic()
        while True:
            try:
                item = self._inbox.get(timeout=_SWEEP_INTERVAL_S)
            except queue.Empty:
                item = "tick"
            if item is None:
                break
            if item != "tick":
                try:
                    item()
                except Exception:  # router must survive any single message
                    log.exception("router task failed")
            now = time.monotonic()
            if now - last_sweep >= _SWEEP_INTERVAL_S:
                last_sweep = now
                self._sweep_heartbeats()

    def _accept_loop(self) -> None:
        assert self._listen_sock is not None
        while not self._stopping.is_set():
            try:
                sock, _ = self._listen_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = ClientSession(self, LineConnection(sock, "cloud"))
            session.start()

    # ------------------------------------------------------------------
    # Fleet-side message handling (router thread)
    # ------------------------------------------------------------------

    def _on_envelope(self, session: ClientSession, env: Envelope) -> None:
        if env.msg_type == MsgType.REGISTER_CLIENT:
            self._register_client(session, env.payload.client_id)
        elif env.msg_type == MsgType.HEARTBEAT:
            info = self._registry.get(env.sender_id)
            if info is not None:
                info.last_heartbeat = now_ms()
                if info.session is session and not info.connected:
                    info.connected = True
        elif env.msg_type == MsgType.TASK_RESULT:
            self._route_result(env)
        elif env.msg_type == MsgType.CODE_ACK:
            handler = self._deployment_handlers.get(env.payload.deployment_id)
            if handler is not None:
                handler.submit(("ack", env.payload))
            else:
                log.warning("CODE_ACK for unknown deployment %s dropped", env.payload.deployment_id)
        elif env.msg_type == MsgType.ERROR:
            self._route_client_error(env.payload)
        else:
            log.warning("unexpected %s from client %s", env.msg_type, env.sender_id)

    def _register_client(self, session: ClientSession, client_id: str) -> None:
        session.client_id = client_id
        previous = self._registry.get(client_id)
        if previous is not None and previous.session is not None and previous.session is not session:
            previous.session.conn.close()
        self._registry[client_id] = ClientInfo(
            client_id=client_id,
            address=session.conn.peer,
            last_heartbeat=now_ms(),
            connected=True,
            session=session,
        )
        with self._mirror_lock:
            self._conns[client_id] = session.conn
        log.info("client %s registered from %s", client_id, session.conn.peer)

    def _on_session_eof(self, session: ClientSession) -> None:
        session.conn.close()
        client_id = session.client_id
        if client_id is None:
            return
        info = self._registry.get(client_id)
        if info is not None and info.session is session:
            info.connected = False
            info.session = None
            with self._mirror_lock:
                if self._conns.get(client_id) is session.conn:
                    del self._conns[client_id]
            log.info("client %s disconnected", client_id)

    def _sweep_heartbeats(self) -> None:
        limit = MISSED_HEARTBEATS_LIMIT * self.config.heartbeat_ms
        now = now_ms()
        for info in self._registry.values():
            if info.connected and now - info.last_heartbeat > limit:
                info.connected = False
                log.warning(
                    "client %s marked disconnected: no heartbeat for %d ms",
                    info.client_id, now - info.last_heartbeat,
                )

    def _route_result(self, env: Envelope) -> None:
        assignment_id = env.payload.assignment_id
        handler = self._assignment_handlers.get(assignment_id)
        if handler is not None:
            handler.submit(("result", env.payload))
            return
        record = self._archive.get(assignment_id)
        if record is not None:
            log.warning(
                "result from %s for finished assignment %s dropped",
                env.payload.client_id, assignment_id,
            )
        else:
            log.warning(
                "result from %s for unknown assignment %s dropped",
                env.payload.client_id, assignment_id,
            )

    def _route_client_error(self, info: ErrorInfo) -> None:
        if info.assignment_id:
            handler = self._assignment_handlers.get(info.assignment_id)
            if handler is not None:
                handler.submit(("error", info))
                return
        log.warning("client error outside any live assignment: %s", info.message)

    # ------------------------------------------------------------------
    # Services used by handlers (called from handler threads)
    # ------------------------------------------------------------------

    def _send_to_client(self, client_id: str, msg_type: str, payload: Any) -> bool:
        with self._mirror_lock:
            conn = self._conns.get(client_id)
            delay_ms = 0.0
            if self.config.fault_injection and msg_type == MsgType.CODE_PUSH:
                delay_ms = self._fault_delays.get(client_id, 0.0)
        if conn is None:
            log.warning("cannot send %s to %s: not connected", msg_type, client_id)
            return False
        if delay_ms > 0:
            timer = threading.Timer(
                delay_ms / 1000.0, self._delayed_send, args=(client_id, msg_type, payload)
            )
            timer.daemon = True
            timer.start()
            return True
        return self._do_send(conn, client_id, msg_type, payload)

    def _delayed_send(self, client_id: str, msg_type: str, payload: Any) -> None:
        with self._mirror_lock:
            conn = self._conns.get(client_id)
        if conn is None:
            log.warning("delayed %s to %s dropped: not connected", msg_type, client_id)
            return
        self._do_send(conn, client_id, msg_type, payload)

    @staticmethod
    def _do_send(conn: LineConnection, client_id: str, msg_type: str, payload: Any) -> bool:
        try:
            conn.send(msg_type, payload)
            return True
        except (NetworkError, FleetError) as exc:
            log.warning("send %s to %s failed: %s", msg_type, client_id, exc)
            return False

    def _current_signature(self, user_id: str, name: str | None) -> str | None:
        if name is None:
            return None
        with self._mirror_lock:
            return self._known_sigs.get((user_id, name))

    def _handler_finished(self, handler) -> None:
        def remove() -> None:
            if isinstance(handler, AssignmentHandler):
                self._assignment_handlers.pop(handler.spec.assignment_id, None)
            else:
                self._deployment_handlers.pop(handler.spec.deployment_id, None)

        self._post(remove)

    # ------------------------------------------------------------------
    # Archive and streams (router thread)
    # ------------------------------------------------------------------

    def _record_status(self, status: StatusRecord) -> None:
        if status.assignment_id is not None:
            record = self._archive.get(status.assignment_id)
            if record is not None:
                record.events.append((MsgType.ASSIGNMENT_STATUS, status))
                if status.state in TERMINAL_STATES or status.state in (
                    State.ACCEPTED, State.RUNNING,
                ):
                    record.state = status.state
                self._publish(record.spec.user_id, MsgType.ASSIGNMENT_STATUS, status)
                return
        if status.deployment_id is not None:
            user_id = self._deployment_owner(status.deployment_id)
            if user_id is not None:
                self._publish(user_id, MsgType.ASSIGNMENT_STATUS, status)

    def _deployment_owner(self, deployment_id: str) -> str | None:
        handler = self._deployment_handlers.get(deployment_id)
        if handler is not None:
            return handler.spec.user_id
        return self._deployment_users.get(deployment_id)

    def _record_output(self, output: IterationOutput) -> None:
        record = self._archive.get(output.assignment_id)
        if record is None:
            return
        record.events.append((MsgType.ITERATION_OUTPUT, output))
        self._publish(record.spec.user_id, MsgType.ITERATION_OUTPUT, output)

    def _record_error(self, user_id: str, error: ErrorInfo) -> None:
        if error.assignment_id:
            record = self._archive.get(error.assignment_id)
            if record is not None:
                record.events.append((MsgType.ERROR, error))
        self._publish(user_id, MsgType.ERROR, error)

    def _publish(self, user_id: str, msg_type: str, payload: Any) -> None:
        assignment_id = getattr(payload, "assignment_id", None)
        for sub in self._subscriptions:
            if sub.user_id != user_id:
                continue
            if sub.assignment_id is not None and sub.assignment_id != assignment_id:
                continue
            sub.sink.put((msg_type, payload))

    # ------------------------------------------------------------------
    # Public API (any thread)
    # ------------------------------------------------------------------

    def ingest_assignment(self, spec: AssignmentSpec) -> StatusRecord:
        """Validate, spawn the assignment handler, dispatch tasks."""
        spec.validate()
        return self._call(lambda: self._ingest(spec))

    def _ingest(self, spec: AssignmentSpec) -> StatusRecord:
        if spec.assignment_id in self._archive:
            raise ValidationError(
                f"assignment id {spec.assignment_id} already used", "assignment_id"
            )
        if spec.method == CUSTOM:
            key = (spec.user_id, spec.custom_module)
            if not self.store.has(*key) and key not in self._client_pushes:
                raise NotFoundError(
                    f"module {spec.custom_module!r} has not been deployed by user "
                    f"{spec.user_id!r} (deploy it before submitting)"
                )
        connected = sorted(
            cid for cid, info in self._registry.items() if info.connected
        )
        if spec.target_clients:
            stale = sorted(
                c for c in spec.target_clients
                if c in self._registry and not self._registry[c].connected
            )
            if stale:
                raise ValidationError(
                    f"clients not connected: {', '.join(stale)}", "target_clients"
                )
        tasks = derive_tasks(spec, connected)
        record = AssignmentRecord(spec=spec)
        self._archive[spec.assignment_id] = record
        status = StatusRecord(
            state=State.ACCEPTED,
            detail=f"{len(tasks)} tasks derived",
            assignment_id=spec.assignment_id,
        )
        self._record_status(status)
        handler = AssignmentHandler(spec, tasks, self._services)
        self._assignment_handlers[spec.assignment_id] = handler
        handler.start()
        return status

    def deploy(self, spec: CodeDeploymentSpec) -> StatusRecord:
        """Deploy a module; blocks until DEPLOYED or FAILED.

        Rejects invalid code and signature mismatches before any push.
        """
        spec.validate()
        if not spec.module.verify_signature():
            raise IntegrityError(
                f"module {spec.module.name} signature {spec.module.signature} does not "
                "match its canonicalized code"
            )
        diagnostics = validate_code(spec.module.code)
        if diagnostics:
            raise ValidationError(
                "module code failed validation: "
                + "; ".join(str(d) for d in diagnostics),
                "module.code",
            )
        kind, value = self._call(lambda: self._accept_deployment(spec))
        if kind == "done":
            return value
        timeout = self.config.ack_timeout_ms / 1000.0 + 120.0
        return value.get(timeout=timeout)

    def _accept_deployment(self, spec: CodeDeploymentSpec):
        if spec.target != "CLOUD":
            connected = sorted(
                cid for cid, info in self._registry.items() if info.connected
            )
            if spec.target_clients:
                missing = sorted(set(spec.target_clients) - set(connected))
                if missing:
                    raise ValidationError(
                        f"target clients not connected: {', '.join(missing)}",
                        "target_clients",
                    )
                targets = list(spec.target_clients)
            else:
                targets = connected
            if not targets:
                raise ValidationError(
                    "no connected clients to deploy to", "target_clients"
                )
        if spec.target in ("CLOUD", "BOTH"):
            self.store.store(spec.module)
        with self._mirror_lock:
            self._known_sigs[(spec.user_id, spec.module.name)] = spec.module.signature
        self._deployment_users[spec.deployment_id] = spec.user_id
        self._publish(
            spec.user_id,
            MsgType.ASSIGNMENT_STATUS,
            StatusRecord(
                state=State.ACCEPTED,
                detail=f"deployment of {spec.module.name} accepted",
                deployment_id=spec.deployment_id,
            ),
        )
        if spec.target == "CLOUD":
            status = StatusRecord(
                state=State.DEPLOYED,
                detail=(
                    f"module {spec.user_id}/{spec.module.name} "
                    f"{spec.module.signature} stored on the cloud"
                ),
                deployment_id=spec.deployment_id,
            )
            self._record_status(status)
            return "done", status
        self._client_pushes.add((spec.user_id, spec.module.name))
        future: queue.Queue = queue.Queue(1)
        handler = DeploymentHandler(spec, targets, self._services, future)
        self._deployment_handlers[spec.deployment_id] = handler
        handler.start()
        return "wait", future

    def cancel_assignment(self, assignment_id: str) -> StatusRecord:
        kind, value = self._call(lambda: self._request_cancel(assignment_id))
        if kind == "done":
            return value
        return value.get(timeout=10.0)

    def _request_cancel(self, assignment_id: str):
        handler = self._assignment_handlers.get(assignment_id)
        if handler is not None:
            future: queue.Queue = queue.Queue(1)
            handler.submit(("cancel", future))
            return "wait", future
        record = self._archive.get(assignment_id)
        if record is None:
            raise NotFoundError(f"unknown assignment {assignment_id}")
        for status in reversed(record.statuses()):
            if status.is_terminal:
                return "done", status
        raise NotFoundError(f"assignment {assignment_id} has no live handler")

    def registry_snapshot(self) -> list[dict]:
        return self._call(
            lambda: [info.snapshot() for _, info in sorted(self._registry.items())]
        )

    def assignment_snapshot(self, assignment_id: str) -> dict:
        def build() -> dict:
            record = self._archive.get(assignment_id)
            if record is None:
                raise NotFoundError(f"unknown assignment {assignment_id}")
            return {
                "assignment_id": assignment_id,
                "state": record.state,
                "outputs": list(record.outputs()),
                "statuses": list(record.statuses()),
            }

        return self._call(build)

    def subscribe(self, user_id: str, assignment_id: str | None = None) -> queue.Queue:
        """Live stream of (msg_type, payload) for one user.

        With an assignment filter, the assignment's archived events are
        replayed into the queue first; the router's single-threaded order
        guarantees no gap and no duplicate between replay and live events.
        """

        def attach() -> queue.Queue:
            sink: queue.Queue = queue.Queue()
            if assignment_id is not None:
                record = self._archive.get(assignment_id)
                if record is not None and record.spec.user_id == user_id:
                    for msg_type, payload in record.events:
                        sink.put((msg_type, payload))
            self._subscriptions.append(_Subscription(user_id, assignment_id, sink))
            return sink

        return self._call(attach)

    def unsubscribe(self, sink: queue.Queue) -> None:
        self._post(
            lambda: self._subscriptions.__setitem__(
                slice(None), [s for s in self._subscriptions if s.sink is not sink]
            )
        )

    def set_fault_delays(self, delays: dict[str, float]) -> None:
        if not self.config.fault_injection:
            raise ValidationError("fault injection is disabled", "fault_injection")
        with self._mirror_lock:
            self._fault_delays = dict(delays)

    def live_assignment_handler_count(self) -> int:
        return self._call(lambda: len(self._assignment_handlers))

    def has_live_assignment(self, assignment_id: str) -> bool:
        return self._call(lambda: assignment_id in self._assignment_handlers)

    def connected_clients(self) -> list[str]:
        return self._call(
            lambda: sorted(c for c, i in self._registry.items() if i.connected)
        )
