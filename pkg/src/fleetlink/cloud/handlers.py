"""Ephemeral per-assignment and per-deployment handlers.

A handler is spawned when work is accepted, processes its own messages
sequentially on its own thread, and terminates after emitting exactly one
terminal status. Handlers never share mutable state with each other; all
interaction with the rest of the cloud goes through HandlerServices
callbacks, which post messages.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from ..errors import FleetError
from ..modstore import ModuleStore
from ..protocol import (
    CUSTOM,
    AssignmentSpec,
    CodeAck,
    CodeDeploymentSpec,
    CodePush,
    ErrorInfo,
    MsgType,
    ResultRecord,
    StatusRecord,
    State,
    TaskSpec,
    builtin_signature,
)
from .filtering import aggregate_iteration, majority_filter

log = logging.getLogger(__name__)


@dataclass
class HandlerServices:
    """Message-passing surface the cloud node hands to its handlers."""

    send_to_client: Callable[[str, str, object], bool]
    emit_status: Callable[[StatusRecord], None]
    emit_output: Callable[[object], None]
    emit_error: Callable[[str, ErrorInfo], None]  # (user_id, error)
    current_signature: Callable[[str, str], str | None]
    on_finished: Callable[[object], None]
    cloud_store: ModuleStore
    iteration_timeout_s: float = 10.0
    ack_timeout_s: float = 5.0


@dataclass
class _IterationBucket:
    opened_at: float
    records: list[ResultRecord] = field(default_factory=list)
    responded: set[str] = field(default_factory=set)


class AssignmentHandler(threading.Thread):
    """Drives one assignment: dispatches tasks, buckets results per
    iteration, applies the majority filter, and aggregates the output."""

    def __init__(self, spec: AssignmentSpec, tasks: list[TaskSpec], services: HandlerServices):
        super().__init__(name=f"assignment-{spec.assignment_id}", daemon=True)
        self.spec = spec
        self.tasks = tasks
        self.services = services
        self.inbox: queue.Queue = queue.Queue()
        self.pending_clients = {t.client_id for t in tasks}
        self._buckets: dict[int, _IterationBucket] = {}
        self._closed: set[int] = set()
        self._terminal: StatusRecord | None = None
        self._cancel_futures: list[queue.Queue] = []
        self._stopped = False

    # -- message-passing surface -------------------------------------------

    def submit(self, message: tuple) -> None:
        self.inbox.put(message)

    # -- lifecycle -----------------------------------------------------------

    def run(self) -> None:
        for task in self.tasks:
            self.services.send_to_client(task.client_id, MsgType.TASK, task)
        self._status(State.RUNNING, f"tasks dispatched to {len(self.tasks)} clients")
        while self._terminal is None and not self._stopped:
            try:
                message = self.inbox.get(timeout=0.05)
            except queue.Empty:
                message = None
            if message is not None:
                self._dispatch(message)
            self._close_expired()
            self._check_complete()
        if self._terminal is not None:
            self.services.emit_status(self._terminal)
            for future in self._cancel_futures:
                future.put(self._terminal)
        self.services.on_finished(self)

    def _dispatch(self, message: tuple) -> None:
        kind = message[0]
        if kind == "result":
            self._on_result(message[1])
        elif kind == "error":
            self._on_error(message[1])
        elif kind == "cancel":
            if len(message) > 1 and message[1] is not None:
                self._cancel_futures.append(message[1])
            self._cancel()
        elif kind == "stop":
            self._stopped = True
        else:  # pragma: no cover
            log.warning("assignment %s: unknown message %r", self.spec.assignment_id, kind)

    # -- result accounting ----------------------------------------------------

    def _on_result(self, record: ResultRecord) -> None:
        if record.iteration in self._closed:
            log.warning(
                "assignment %s: late result from %s for closed iteration %d dropped",
                self.spec.assignment_id, record.client_id, record.iteration,
            )
            return
        if record.client_id not in self.pending_clients:
            log.warning(
                "assignment %s: result from untasked client %s dropped",
                self.spec.assignment_id, record.client_id,
            )
            return
        bucket = self._buckets.setdefault(record.iteration, _IterationBucket(time.monotonic()))
        if record.client_id in bucket.responded:
            log.warning(
                "assignment %s: duplicate result from %s for iteration %d dropped",
                self.spec.assignment_id, record.client_id, record.iteration,
            )
            return
        bucket.responded.add(record.client_id)
        bucket.records.append(record)
        if bucket.responded >= self.pending_clients:
            self._close_iteration(record.iteration)

    def _on_error(self, info: ErrorInfo) -> None:
        self.services.emit_error(self.spec.user_id, info)
        if info.iteration is None or info.client_id is None:
            return
        if info.iteration in self._closed:
            return
        # An error is this client's response for the iteration: don't hold
        # the bucket open waiting for a value that will never come.
        bucket = self._buckets.setdefault(info.iteration, _IterationBucket(time.monotonic()))
        bucket.responded.add(info.client_id)
        if bucket.responded >= self.pending_clients:
            self._close_iteration(info.iteration)

    def _close_expired(self) -> None:
        now = time.monotonic()
        due = [
            iteration
            for iteration, bucket in self._buckets.items()
            if now - bucket.opened_at >= self.services.iteration_timeout_s
        ]
        for iteration in sorted(due):
            self._close_iteration(iteration)

    def _close_iteration(self, iteration: int) -> None:
        bucket = self._buckets.pop(iteration, None)
        self._closed.add(iteration)
        if bucket is None or not bucket.records:
            self._status(
                State.ITERATION_DISCARDED,
                f"iteration {iteration}: no results received before timeout",
            )
            return
        current = self._current_signature()
        accepted, signature, discarded = majority_filter(bucket.records, current)
        if signature is None:
            histogram = self._histogram(bucket.records)
            self._status(
                State.ITERATION_DISCARDED,
                f"iteration {iteration}: unresolved signature tie ({histogram})",
            )
            return
        try:
            output = aggregate_iteration(
                accepted, self.spec, self.services.cloud_store, len(discarded)
            )
        except FleetError as exc:
            self.services.emit_error(
                self.spec.user_id,
                ErrorInfo(
                    code=getattr(exc, "code", "error"),
                    message=f"off-board step failed: {exc}",
                    assignment_id=self.spec.assignment_id,
                    iteration=iteration,
                ),
            )
            return
        self.services.emit_output(output)

    def _current_signature(self) -> str | None:
        if self.spec.method == CUSTOM:
            return self.services.current_signature(self.spec.user_id, self.spec.custom_module)
        return builtin_signature(self.spec.method)

    @staticmethod
    def _histogram(records: list[ResultRecord]) -> str:
        counts: dict[str, int] = {}
        for r in records:
            counts[r.signature] = counts.get(r.signature, 0) + 1
        return ", ".join(f"{n} x {sig[:12]}" for sig, n in sorted(counts.items()))

    # -- termination ------------------------------------------------------------

    def _check_complete(self) -> None:
        if self._terminal is not None or self.spec.is_indefinite:
            return
        if len(self._closed) >= int(self.spec.iterations):
            self._terminal = StatusRecord(
                state=State.COMPLETED,
                detail=f"all {self.spec.iterations} iterations emitted",
                assignment_id=self.spec.assignment_id,
            )

    def _cancel(self) -> None:
        if self._terminal is not None:
            return
        self._terminal = StatusRecord(
            state=State.CANCELLED,
            detail="cancelled by user",
            assignment_id=self.spec.assignment_id,
        )
        for client_id in sorted(self.pending_clients):
            self.services.send_to_client(client_id, MsgType.ASSIGNMENT_STATUS, self._terminal)

    def _status(self, state: str, detail: str) -> None:
        self.services.emit_status(
            StatusRecord(state=state, detail=detail, assignment_id=self.spec.assignment_id)
        )


class DeploymentHandler(threading.Thread):
    """Pushes one code deployment to its target clients and collects acks."""

    def __init__(
        self,
        spec: CodeDeploymentSpec,
        targets: list[str],
        services: HandlerServices,
        result_future: queue.Queue,
    ):
        super().__init__(name=f"deployment-{spec.deployment_id}", daemon=True)
        self.spec = spec
        self.targets = list(targets)
        self.services = services
        self.result_future = result_future
        self.inbox: queue.Queue = queue.Queue()

    def submit(self, message: tuple) -> None:
        self.inbox.put(message)

    def run(self) -> None:
        push = CodePush(deployment_id=self.spec.deployment_id, module=self.spec.module)
        for client_id in self.targets:
            self.services.send_to_client(client_id, MsgType.CODE_PUSH, push)
        acked: set[str] = set()
        deadline = time.monotonic() + self.services.ack_timeout_s
        while acked < set(self.targets):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                message = self.inbox.get(timeout=remaining)
            except queue.Empty:
                break
            if message[0] == "ack":
                ack: CodeAck = message[1]
                if (
                    ack.deployment_id == self.spec.deployment_id
                    and ack.signature == self.spec.module.signature
                ):
                    acked.add(ack.client_id)
            elif message[0] == "stop":
                break
        missing = sorted(set(self.targets) - acked)
        if missing:
            status = StatusRecord(
                state=State.FAILED,
                detail=f"no CODE_ACK from: {', '.join(missing)}",
                deployment_id=self.spec.deployment_id,
            )
        else:
            status = StatusRecord(
                state=State.DEPLOYED,
                detail=(
                    f"module {self.spec.user_id}/{self.spec.module.name} "
                    f"{self.spec.module.signature} acknowledged by "
                    f"{len(self.targets)} clients"
                ),
                deployment_id=self.spec.deployment_id,
            )
        self.services.emit_status(status)
        self.result_future.put(status)
        self.services.on_finished(self)
