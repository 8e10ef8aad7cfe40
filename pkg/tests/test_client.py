from __future__ import annotations

import threading
import time

import pytest

from fleetlink.client import TaskHandler
from fleetlink.modstore import ModuleStore
from fleetlink.protocol import INDEFINITE, CodeModule, MsgType, TaskSpec
from fleetlink.telemetry import TelemetrySource


class ScriptedTelemetry:
    """Telemetry stand-in replaying a fixed sequence, unpaced."""

    def __init__(self, values):
        self._values = list(values)

    def stream(self):
        yield from self._values
        while True:  # park instead of exhausting, like a live source
            time.sleep(0.01)
            yield self._values[-1]


class StubNode:
    def __init__(self, store, telemetry):
        self.store = store
        self.telemetry = telemetry
        self.sent = []
        self.done = []
        self._lock = threading.Lock()

    def send(self, msg_type, payload):
        with self._lock:
            self.sent.append((msg_type, payload))
        return True

    def _handler_done(self, handler):
        self.done.append(handler)

    def results(self):
        with self._lock:
            return [p for t, p in self.sent if t == MsgType.TASK_RESULT]

    def errors(self):
        with self._lock:
            return [p for t, p in self.sent if t == MsgType.ERROR]


def _task(method="CUSTOM", module="agg", window=4, iterations=2, client="c1", assignment="a-1"):
    return TaskSpec(
        assignment_id=assignment,
        task_id=f"{assignment}:{client}",
        user_id="u1",
        client_id=client,
        method=method,
        custom_module=module if method == "CUSTOM" else None,
        window_size=window,
        iterations=iterations,
        params={},
    )


@pytest.fixture
def store(tmp_path):
    return ModuleStore(tmp_path / "modules")


def run_handler(node, task, timeout=5.0):
    handler = TaskHandler(node, task)
    handler.start()
    handler.join(timeout=timeout)
    assert not handler.is_alive(), "task handler did not terminate"
    return handler


class TestTaskHandler:
    def test_windowed_means_over_scripted_stream(self, store):
        # Stream 1..8 with window 4: mean(1,2,3,4)=2.5 then mean(5,6,7,8)=6.5.
        module = CodeModule.create("u1", "agg", "mean(xs)")
        store.store(module)
        node = StubNode(store, ScriptedTelemetry([1, 2, 3, 4, 5, 6, 7, 8]))
        run_handler(node, _task())
        results = node.results()
        assert [r.value for r in results] == [2.5, 6.5]
        assert [r.iteration for r in results] == [0, 1]
        assert {r.signature for r in results} == {module.signature}

    def test_builtin_method_uses_reserved_signature(self, store):
        node = StubNode(store, ScriptedTelemetry([2, 4, 2, 4]))
        run_handler(node, _task(method="max", window=2, iterations=2))
        results = node.results()
        assert [r.value for r in results] == [4.0, 4.0]
        assert {r.signature for r in results} == {"builtin:max"}

    def test_code_replaced_between_iterations_flips_signature(self, store):
        v1 = CodeModule.create("u1", "agg", "min(xs)")
        v2 = CodeModule.create("u1", "agg", "max(xs)")
        store.store(v1)

        class SwapAfterFirstWindow(ScriptedTelemetry):
            def __init__(self):
                super().__init__([1, 2, 3, 4])
                self.swapped = False

            def stream(self):
                for i, v in enumerate(super().stream()):
                    # Swap during collection of the second window; the
                    # boundary load means iteration 1 uses v2.
                    if i == 2 and not self.swapped:
                        store.store(v2)
                        self.swapped = True
                    yield v

        node = StubNode(store, SwapAfterFirstWindow())
        run_handler(node, _task(window=2, iterations=2))
        results = node.results()
        assert [r.signature for r in results] == [v1.signature, v2.signature]
        assert [r.value for r in results] == [1.0, 4.0]  # min(1,2) then max(3,4)

    def test_missing_module_errors_per_iteration_and_recovers(self, store):
        module = CodeModule.create("u1", "agg", "mean(xs)")

        class DeployDuringRun(ScriptedTelemetry):
            def stream(self):
                for i, v in enumerate(super().stream()):
                    if i == 3:  # module arrives mid-run, before iteration 1 closes
                        store.store(module)
                    yield v

        node = StubNode(store, DeployDuringRun([1, 2, 3, 4, 5, 6]))
        run_handler(node, _task(window=2, iterations=3))
        errors = node.errors()
        results = node.results()
        assert len(errors) == 1
        assert errors[0].iteration == 0
        assert errors[0].module == "agg"
        assert "agg" in errors[0].message
        assert [r.iteration for r in results] == [1, 2]

    def test_evaluation_error_isolated_per_iteration(self, store):
        # Window mean is 0 on the second window only.
        store.store(CodeModule.create("u1", "agg", "1 / mean(xs)"))
        node = StubNode(store, ScriptedTelemetry([1, 1, 1, -1, 2, 2]))
        run_handler(node, _task(window=2, iterations=3))
        assert [e.iteration for e in node.errors()] == [1]
        assert [r.iteration for r in node.results()] == [0, 2]

    def test_concurrent_tasks_tag_their_own_assignment(self, store):
        store.store(CodeModule.create("u1", "agg", "sum(xs)"))
        node = StubNode(store, ScriptedTelemetry(list(range(1, 9))))
        h1 = TaskHandler(node, _task(assignment="a-1", window=2, iterations=2))
        h2 = TaskHandler(node, _task(assignment="a-2", window=2, iterations=2))
        h1.start(), h2.start()
        h1.join(timeout=5), h2.join(timeout=5)
        results = node.results()
        by_assignment = {}
        for r in results:
            by_assignment.setdefault(r.assignment_id, []).append(r.value)
        # Each handler consumes its own stream from the start: identical values.
        assert by_assignment["a-1"] == by_assignment["a-2"] == [3.0, 7.0]

    def test_indefinite_task_stops_on_request(self, store):
        store.store(CodeModule.create("u1", "agg", "mean(xs)"))
        node = StubNode(store, ScriptedTelemetry(list(range(1000))))
        handler = TaskHandler(node, _task(window=2, iterations=INDEFINITE))
        handler.start()
        deadline = time.monotonic() + 2.0
        while not node.results() and time.monotonic() < deadline:
            time.sleep(0.005)
        handler.stop_event.set()
        handler.join(timeout=2.0)
        assert not handler.is_alive()
        assert node.results(), "expected at least one result before cancel"

    def test_handler_deregisters_on_completion(self, store):
        store.store(CodeModule.create("u1", "agg", "mean(xs)"))
        node = StubNode(store, ScriptedTelemetry([1, 2]))
        handler = run_handler(node, _task(window=2, iterations=1))
        assert node.done == [handler]


class TestTelemetry:
    def test_same_seed_same_stream(self):
        a = TelemetrySource(seed=42, rate=1e6)
        b = TelemetrySource(seed=42, rate=1e6)
        assert a.values(200) == b.values(200)

    def test_different_seeds_differ(self):
        assert TelemetrySource(1, 1e6).values(50) != TelemetrySource(2, 1e6).values(50)

    def test_stream_matches_values(self):
        source = TelemetrySource(seed=7, rate=1e6)
        stream = source.stream()
        assert [next(stream) for _ in range(50)] == source.values(50)

    def test_multiple_streams_replay_from_start(self):
        source = TelemetrySource(seed=9, rate=1e6)
        s1 = source.stream()
        first = [next(s1) for _ in range(10)]
        s2 = source.stream()
        assert [next(s2) for _ in range(10)] == first

    def test_pacing_roughly_matches_rate(self):
        source = TelemetrySource(seed=1, rate=200.0)
        stream = source.stream()
        started = time.monotonic()
        for _ in range(20):
            next(stream)
        elapsed = time.monotonic() - started
        assert 0.05 <= elapsed <= 1.0  # 20 values at 200/s is nominally 100 ms

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            TelemetrySource(seed=1, rate=0)
