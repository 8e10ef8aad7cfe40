"""The permanent client node: a telemetry-producing fleet member.

Registers with the cloud, heartbeats, spawns one ephemeral task handler
per received task, executes on-board computations per iteration, and
applies code pushes to its local module store without interrupting any
running handler. For custom methods the module is reloaded from the store
at each iteration boundary (after the window fills, before execution), so
a push takes effect at the next boundary it precedes.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from typing import Any

from .errors import (
    EvaluationError,
    FleetError,
    IntegrityError,
    NetworkError,
    NotFoundError,
    StorageError,
    ValidationError,
)
from .executor import WindowBatch, execute, execute_builtin
from .modstore import ModuleStore
from .netio import LineConnection, connect_with_backoff, parse_address
from .protocol import (
    CUSTOM,
    CodeAck,
    CodePush,
    Envelope,
    ErrorInfo,
    Heartbeat,
    MsgType,
    Registration,
    ResultRecord,
    TaskSpec,
    now_ms,
)
from .telemetry import TelemetrySource

log = logging.getLogger(__name__)


class TaskHandler(threading.Thread):
    """Runs one task: collect a window, execute, report, repeat."""

    def __init__(self, node: "ClientNode", task: TaskSpec):
        super().__init__(name=f"task-{task.task_id}", daemon=True)
        self.node = node
        self.task = task
        self.stop_event = threading.Event()

    def run(self) -> None:
        task = self.task
        stream = self.node.telemetry.stream()
        iteration = 0
        try:
            while not self.stop_event.is_set():
                if not task.is_indefinite and iteration >= int(task.iterations):
                    break
                window = self._collect(stream, task.window_size)
                if window is None:
                    break
                self._run_iteration(iteration, window)
                iteration += 1
        finally:
            self.node._handler_done(self)

    def _collect(self, stream, count: int) -> tuple[float, ...] | None:
        window = []
        for _ in range(count):
            if self.stop_event.is_set():
                return None
            window.append(next(stream))
        return tuple(window)

    def _run_iteration(self, iteration: int, window: tuple[float, ...]) -> None:
        task = self.task
        batch = WindowBatch(values=window, assignment_id=task.assignment_id, iteration=iteration)
        try:
            if task.method == CUSTOM:
                # The boundary load: fresh from disk, every iteration.
                module = self.node.store.load(task.user_id, task.custom_module)
                result = execute(module, batch, task.params)
            else:
                result = execute_builtin(task.method, batch)
        except NotFoundError as exc:
            self._report_error("not_found", str(exc), iteration, task.custom_module)
            return
        except (EvaluationError, IntegrityError, ValidationError) as exc:
            self._report_error(exc.code, str(exc), iteration, task.custom_module)
            return
        record = ResultRecord(
            assignment_id=task.assignment_id,
            client_id=task.client_id,
            iteration=iteration,
            value=result.value,
            signature=result.signature,
            produced_at=now_ms(),
        )
        self.node.send(MsgType.TASK_RESULT, record)

    def _report_error(self, code: str, message: str, iteration: int, module: str | None) -> None:
        log.warning("task %s iteration %d failed: %s", self.task.task_id, iteration, message)
        self.node.send(
            MsgType.ERROR,
            ErrorInfo(
                code=code,
                message=message,
                assignment_id=self.task.assignment_id,
                client_id=self.task.client_id,
                iteration=iteration,
                module=module,
            ),
        )


class ClientNode:
    def __init__(
        self,
        client_id: str,
        cloud_host: str,
        cloud_port: int,
        seed: int,
        rate: float = 100.0,
        module_root: str | os.PathLike = "",
        heartbeat_ms: int = 2000,
    ):
        self.client_id = client_id
        self.cloud_host = cloud_host
        self.cloud_port = cloud_port
        self.telemetry = TelemetrySource(seed, rate)
        self.store = ModuleStore(module_root or f"./modules-{client_id}")
        self.heartbeat_ms = heartbeat_ms

        self._stop = threading.Event()
        self._conn_lock = threading.Lock()
        self._conn: LineConnection | None = None
        self._conn_generation = 0
        self._handlers_lock = threading.Lock()
        self._handlers: dict[str, TaskHandler] = {}
        self._main_thread: threading.Thread | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self._main_thread = threading.Thread(
            target=self._connection_loop, name=f"client-{self.client_id}", daemon=True
        )
        self._main_thread.start()

    def stop(self) -> None:
        self._stop.set()
        with self._handlers_lock:
            handlers = list(self._handlers.values())
        for handler in handlers:
            handler.stop_event.set()
        for handler in handlers:
            handler.join(timeout=2.0)
        with self._conn_lock:
            conn, self._conn = self._conn, None
        if conn is not None:
            conn.close()
        if self._main_thread is not None:
            self._main_thread.join(timeout=3.0)

    def wait(self) -> None:
        while not self._stop.wait(0.5):
            pass

    # -- connection management -------------------------------------------------

    def _connection_loop(self) -> None:
        while not self._stop.is_set():
            conn = connect_with_backoff(
                self.cloud_host, self.cloud_port, self.client_id, self._stop
            )
            if conn is None:
                return
            with self._conn_lock:
                self._conn = conn
                self._conn_generation += 1
                generation = self._conn_generation
            try:
                conn.send(MsgType.REGISTER_CLIENT, Registration(self.client_id))
            except NetworkError:
                continue
            log.info("client %s connected to %s:%d", self.client_id, self.cloud_host, self.cloud_port)
            beat = threading.Thread(
                target=self._heartbeat_loop, args=(conn, generation),
                name=f"heartbeat-{self.client_id}", daemon=True,
            )
            beat.start()
            self._read_loop(conn)
            with self._conn_lock:
                if self._conn is conn:
                    self._conn = None
            conn.close()
            if not self._stop.is_set():
                log.warning("client %s lost its cloud connection; reconnecting", self.client_id)

    def _heartbeat_loop(self, conn: LineConnection, generation: int) -> None:
        interval = self.heartbeat_ms / 1000.0
        while not self._stop.wait(interval):
            with self._conn_lock:
                if self._conn is not conn or self._conn_generation != generation:
                    return
            try:
                conn.send(MsgType.HEARTBEAT, Heartbeat())
            except NetworkError:
                return

    def _read_loop(self, conn: LineConnection) -> None:
        while not self._stop.is_set():
            try:
                env = conn.recv()
            except NetworkError:
                return
            except FleetError as exc:
                log.warning("bad line from cloud dropped: %s", exc)
                continue
            if env is None:
                return
            try:
                self._dispatch(env)
            except Exception:
                log.exception("failed to handle %s", env.msg_type)

    # -- inbound messages ---------------------------------------------------------

    def _dispatch(self, env: Envelope) -> None:
        if env.msg_type == MsgType.TASK:
            self._on_task(env.payload)
        elif env.msg_type == MsgType.CODE_PUSH:
            self._on_code_push(env.payload)
        elif env.msg_type == MsgType.ASSIGNMENT_STATUS:
            status = env.payload
            if status.is_terminal and status.assignment_id:
                self._stop_assignment_handlers(status.assignment_id)
        else:
            log.warning("unexpected %s from cloud", env.msg_type)

    def _on_task(self, task: TaskSpec) -> None:
        with self._handlers_lock:
            if task.task_id in self._handlers:
                log.warning("task %s already running; duplicate dropped", task.task_id)
                return
            handler = TaskHandler(self, task)
            self._handlers[task.task_id] = handler
        log.info(
            "task %s accepted: method=%s window=%d iterations=%s",
            task.task_id, task.method, task.window_size, task.iterations,
        )
        handler.start()

    def _on_code_push(self, push: CodePush) -> None:
        module = push.module
        try:
            stored = self.store.store(module)
        except (IntegrityError, ValidationError, StorageError) as exc:
            log.warning("code push %s rejected: %s", push.deployment_id, exc)
            self.send(
                MsgType.ERROR,
                ErrorInfo(
                    code=exc.code,
                    message=f"code push rejected: {exc}",
                    client_id=self.client_id,
                    module=module.name,
                ),
            )
            return
        log.info(
            "module %s/%s updated to %s", module.user_id, module.name, stored.signature
        )
        self.send(
            MsgType.CODE_ACK,
            CodeAck(
                deployment_id=push.deployment_id,
                client_id=self.client_id,
                user_id=module.user_id,
                name=module.name,
                signature=stored.signature,
            ),
        )

    def _stop_assignment_handlers(self, assignment_id: str) -> None:
        with self._handlers_lock:
            matching = [
                h for h in self._handlers.values()
                if h.task.assignment_id == assignment_id
            ]
        for handler in matching:
            handler.stop_event.set()

    def _handler_done(self, handler: TaskHandler) -> None:
        with self._handlers_lock:
            self._handlers.pop(handler.task.task_id, None)

    def live_task_count(self) -> int:
        with self._handlers_lock:
            return len(self._handlers)

    # -- outbound ----------------------------------------------------------------

    def send(self, msg_type: str, payload: Any) -> bool:
        with self._conn_lock:
            conn = self._conn
        if conn is None:
            log.warning("dropping %s: not connected to the cloud", msg_type)
            return False
        try:
            conn.send(msg_type, payload)
            return True
        except (NetworkError, FleetError) as exc:
            log.warning("send %s failed: %s", msg_type, exc)
            return False


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-client", description=__doc__)
    parser.add_argument("--id", default=os.environ.get("FLEET_CLIENT_ID"),
                        help="client id (env FLEET_CLIENT_ID)")
    parser.add_argument("--cloud", default=os.environ.get("FLEET_CLOUD_ADDR"),
                        help="cloud address host:port (env FLEET_CLOUD_ADDR)")
    parser.add_argument("--seed", type=int, required=True, help="telemetry seed")
    parser.add_argument("--rate", type=float, default=100.0, help="telemetry values per second")
    parser.add_argument("--module-root", default=os.environ.get("FLEET_MODULE_ROOT"),
                        help="module store directory (env FLEET_MODULE_ROOT)")
    parser.add_argument("--heartbeat-ms", type=int, default=2000)
    parser.add_argument("--log-level", default=os.environ.get("FLEET_LOG", "info"))
    args = parser.parse_args(argv)
    if not args.id:
        parser.error("--id is required (or set FLEET_CLIENT_ID)")
    if not args.cloud:
        parser.error("--cloud is required (or set FLEET_CLOUD_ADDR)")

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    host, port = parse_address(args.cloud)
    node = ClientNode(
        client_id=args.id,
        cloud_host=host,
        cloud_port=port,
        seed=args.seed,
        rate=args.rate,
        module_root=args.module_root or f"./modules-{args.id}",
        heartbeat_ms=args.heartbeat_ms,
    )
    node.start()
    print(f"fleet-client {args.id} ready (cloud {args.cloud}, seed {args.seed})", flush=True)

    def shutdown(signum, frame):
        node._stop.set()

    signal.signal(signal.SIGTERM, shutdown)
    signal.signal(signal.SIGINT, shutdown)
    node.wait()
    node.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
