"""Cloud and client nodes wired over real localhost sockets, in one process."""

from __future__ import annotations

import contextlib
import math
import queue
import time

import pytest

from fleetlink.client import ClientNode
from fleetlink.cloud import CloudNode
from fleetlink.config import FleetConfig
from fleetlink.errors import NotFoundError, ValidationError
from fleetlink.netio import connect, wait_for
from fleetlink.protocol import (
    INDEFINITE,
    AssignmentSpec,
    CodeDeploymentSpec,
    CodeModule,
    Heartbeat,
    MsgType,
    Registration,
    State,
    new_id,
)
from fleetlink.telemetry import TelemetrySource

RATE = 2000.0
SEED_BASE = 100


@contextlib.contextmanager
def fleet(tmp_path, n_clients=3, heartbeat_ms=500, ack_timeout_ms=2000,
          iteration_timeout_ms=3000, fault_injection=False):
    config = FleetConfig(
        client_port=0,
        gateway_port=0,
        module_root=str(tmp_path / "cloud-modules"),
        ack_timeout_ms=ack_timeout_ms,
        iteration_timeout_ms=iteration_timeout_ms,
        heartbeat_ms=heartbeat_ms,
        fault_injection=fault_injection,
    )
    node = CloudNode(config)
    node.start()
    clients = []
    try:
        for i in range(n_clients):
            client = ClientNode(
                client_id=f"c{i}",
                cloud_host="127.0.0.1",
                cloud_port=node.client_port,
                seed=SEED_BASE + i,
                rate=RATE,
                module_root=tmp_path / f"client-{i}-modules",
                heartbeat_ms=heartbeat_ms,
            )
            client.start()
            clients.append(client)
        expected = sorted(c.client_id for c in clients)
        assert wait_for(lambda: node.connected_clients() == expected, timeout=5.0), \
            f"clients never registered: {node.connected_clients()}"
        yield node, clients
    finally:
        for client in clients:
            client.stop()
        node.stop()


def deploy(node, user, name, code, target="BOTH", clients=()):
    spec = CodeDeploymentSpec(
        deployment_id=new_id("d"),
        user_id=user,
        target=target,
        target_clients=tuple(clients),
        module=CodeModule.create(user, name, code),
    )
    return spec, node.deploy(spec)


def submit(node, user, module, iterations=3, window=4, targets=(), method="CUSTOM"):
    spec = AssignmentSpec(
        assignment_id=new_id("a"),
        user_id=user,
        method=method,
        custom_module=module if method == "CUSTOM" else None,
        target_clients=tuple(targets),
        iterations=iterations,
        window_size=window,
        params={},
    )
    node.ingest_assignment(spec)
    return spec


def drain_until_terminal(sink, timeout=15.0):
    """Collect (msg_type, payload) until a terminal status or timeout."""
    events = []
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            item = sink.get(timeout=0.2)
        except queue.Empty:
            continue
        if item[0] == "__close__":
            break
        events.append(item)
        if item[0] == MsgType.ASSIGNMENT_STATUS and item[1].is_terminal:
            break
    return events


def outputs_of(events):
    return [p for t, p in events if t == MsgType.ITERATION_OUTPUT]


def terminal_of(events):
    for t, p in events:
        if t == MsgType.ASSIGNMENT_STATUS and p.is_terminal:
            return p
    return None


class TestRegistrationAndLiveness:
    def test_clients_appear_connected(self, tmp_path):
        with fleet(tmp_path) as (node, clients):
            snapshot = node.registry_snapshot()
            assert [c["client_id"] for c in snapshot] == ["c0", "c1", "c2"]
            assert all(c["connected"] for c in snapshot)
            assert all(c["last_heartbeat"] > 0 for c in snapshot)

    def test_silent_peer_marked_disconnected_after_missed_heartbeats(self, tmp_path):
        with fleet(tmp_path, n_clients=1, heartbeat_ms=150) as (node, _):
            conn = connect("127.0.0.1", node.client_port, "ghost")
            conn.send(MsgType.REGISTER_CLIENT, Registration("ghost"))
            assert wait_for(lambda: "ghost" in node.connected_clients(), timeout=3.0)
            # No heartbeats: 3 missed intervals plus sweep slack.
            assert wait_for(
                lambda: "ghost" not in node.connected_clients(), timeout=3.0
            ), "silent client was never marked disconnected"
            entries = {c["client_id"]: c for c in node.registry_snapshot()}
            assert entries["ghost"]["connected"] is False
            conn.close()

    def test_heartbeats_keep_client_connected(self, tmp_path):
        with fleet(tmp_path, n_clients=1, heartbeat_ms=150) as (node, clients):
            time.sleep(1.2)  # several sweep periods
            assert node.connected_clients() == ["c0"]

    def test_reconnect_same_id_no_duplicate(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, clients):
            victim = clients[0]
            victim.stop()
            assert wait_for(lambda: node.connected_clients() == ["c1"], timeout=5.0)
            replacement = ClientNode(
                client_id="c0",
                cloud_host="127.0.0.1",
                cloud_port=node.client_port,
                seed=SEED_BASE,
                rate=RATE,
                module_root=tmp_path / "client-0-modules",
                heartbeat_ms=500,
            )
            replacement.start()
            clients[0] = replacement  # so the fixture stops it
            assert wait_for(lambda: node.connected_clients() == ["c0", "c1"], timeout=5.0)
            assert len(node.registry_snapshot()) == 2


class TestDeployment:
    def test_deploy_both_stores_everywhere(self, tmp_path):
        with fleet(tmp_path) as (node, clients):
            spec, status = deploy(node, "u1", "agg", "mean(xs)")
            assert status.state == State.DEPLOYED
            assert node.store.has("u1", "agg")
            assert wait_for(
                lambda: all(c.store.has("u1", "agg") for c in clients), timeout=3.0
            )
            for client in clients:
                assert client.store.load("u1", "agg").signature == spec.module.signature

    def test_deploy_cloud_only_no_client_traffic(self, tmp_path):
        with fleet(tmp_path) as (node, clients):
            _, status = deploy(node, "u1", "agg", "mean(xs)", target="CLOUD")
            assert status.state == State.DEPLOYED
            time.sleep(0.3)
            assert not any(c.store.has("u1", "agg") for c in clients)

    def test_silent_client_fails_deployment(self, tmp_path):
        with fleet(tmp_path, n_clients=2, ack_timeout_ms=600) as (node, clients):
            conn = connect("127.0.0.1", node.client_port, "mute")
            conn.send(MsgType.REGISTER_CLIENT, Registration("mute"))
            conn.send(MsgType.HEARTBEAT, Heartbeat())
            assert wait_for(lambda: "mute" in node.connected_clients(), timeout=3.0)
            _, status = deploy(node, "u1", "agg", "mean(xs)", target="CLIENTS")
            assert status.state == State.FAILED
            assert "mute" in status.detail
            assert "c0" not in status.detail
            conn.close()

    def test_invalid_code_rejected_before_any_push(self, tmp_path):
        with fleet(tmp_path, n_clients=1) as (node, clients):
            with pytest.raises(ValidationError):
                deploy(node, "u1", "agg", "mean(ys)")
            time.sleep(0.2)
            assert not clients[0].store.has("u1", "agg")

    def test_users_deploy_same_name_without_interference(self, tmp_path):
        with fleet(tmp_path, n_clients=1) as (node, clients):
            deploy(node, "u1", "agg", "min(xs)")
            deploy(node, "u2", "agg", "max(xs)")
            assert wait_for(
                lambda: clients[0].store.has("u1", "agg")
                and clients[0].store.has("u2", "agg"),
                timeout=3.0,
            )
            assert clients[0].store.load("u1", "agg").code == "min(xs)\n"
            assert clients[0].store.load("u2", "agg").code == "max(xs)\n"


def expected_outputs(seeds, window, iterations, client_reduce, cloud_reduce):
    """Independent end-to-end oracle from the deterministic walks."""
    outs = []
    for i in range(iterations):
        per_client = []
        for seed in seeds:
            values = TelemetrySource(seed, RATE).values(window * iterations)
            per_client.append(client_reduce(values[i * window:(i + 1) * window]))
        outs.append(cloud_reduce(per_client))
    return outs


class TestAssignmentEndToEnd:
    def test_custom_assignment_produces_expected_outputs(self, tmp_path):
        with fleet(tmp_path) as (node, clients):
            dep, _ = deploy(node, "u1", "agg", "mean(xs)")
            sink = node.subscribe("u1")
            spec = submit(node, "u1", "agg", iterations=3, window=4)
            events = drain_until_terminal(sink)
            outs = outputs_of(events)
            assert len(outs) == 3
            assert [o.iteration for o in outs] == [0, 1, 2]
            assert all(o.accepted_signature == dep.module.signature for o in outs)
            assert all(o.accepted_count == 3 and o.discarded_count == 0 for o in outs)
            assert all(o.offboard_signature == dep.module.signature for o in outs)
            terminal = terminal_of(events)
            assert terminal is not None and terminal.state == State.COMPLETED

            mean = lambda vals: math.fsum(vals) / len(vals)
            expected = expected_outputs(
                [SEED_BASE + i for i in range(3)], 4, 3, mean, mean
            )
            assert [o.value for o in outs] == pytest.approx(expected, rel=1e-9)

            assert wait_for(lambda: node.live_assignment_handler_count() == 0, timeout=3.0)
            node.unsubscribe(sink)

    def test_builtin_assignment(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, clients):
            sink = node.subscribe("u1")
            submit(node, "u1", None, method="median", iterations=2, window=5)
            events = drain_until_terminal(sink)
            outs = outputs_of(events)
            assert len(outs) == 2
            assert all(o.accepted_signature == "builtin:median" for o in outs)
            assert terminal_of(events).state == State.COMPLETED
            node.unsubscribe(sink)

    def test_targeted_subset(self, tmp_path):
        with fleet(tmp_path) as (node, clients):
            deploy(node, "u1", "agg", "sum(xs)")
            sink = node.subscribe("u1")
            submit(node, "u1", "agg", iterations=2, window=3, targets=("c0", "c2"))
            events = drain_until_terminal(sink)
            outs = outputs_of(events)
            assert all(o.accepted_count == 2 for o in outs)
            node.unsubscribe(sink)

    def test_unknown_target_rejected(self, tmp_path):
        with fleet(tmp_path, n_clients=1) as (node, _):
            deploy(node, "u1", "agg", "mean(xs)")
            with pytest.raises(ValidationError, match="nope"):
                submit(node, "u1", "agg", targets=("nope",))

    def test_custom_without_deployment_rejected(self, tmp_path):
        with fleet(tmp_path, n_clients=1) as (node, _):
            with pytest.raises(NotFoundError, match="ghostmod"):
                submit(node, "u1", "ghostmod")

    def test_cancel_indefinite(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, clients):
            deploy(node, "u1", "agg", "mean(xs)")
            sink = node.subscribe("u1")
            spec = submit(node, "u1", "agg", iterations=INDEFINITE, window=4)
            assert wait_for(
                lambda: any(c.live_task_count() > 0 for c in clients), timeout=3.0
            )
            deadline = time.monotonic() + 5.0
            got_output = False
            while time.monotonic() < deadline and not got_output:
                try:
                    t, p = sink.get(timeout=0.2)
                    got_output = t == MsgType.ITERATION_OUTPUT
                except queue.Empty:
                    pass
            assert got_output, "no output before cancel"
            status = node.cancel_assignment(spec.assignment_id)
            assert status.state == State.CANCELLED
            assert wait_for(lambda: node.live_assignment_handler_count() == 0, timeout=3.0)
            assert wait_for(
                lambda: all(c.live_task_count() == 0 for c in clients), timeout=3.0
            ), "client task handlers survived the cancel"
            node.unsubscribe(sink)

    def test_cancel_unknown_assignment(self, tmp_path):
        with fleet(tmp_path, n_clients=1) as (node, _):
            with pytest.raises(NotFoundError):
                node.cancel_assignment("a-missing")

    def test_concurrent_users_route_independently(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, clients):
            deploy(node, "u1", "agg", "min(xs)")
            deploy(node, "u2", "agg", "max(xs)")
            sink1 = node.subscribe("u1")
            sink2 = node.subscribe("u2")
            spec1 = submit(node, "u1", "agg", iterations=2, window=4)
            spec2 = submit(node, "u2", "agg", iterations=2, window=4)
            events1 = drain_until_terminal(sink1)
            events2 = drain_until_terminal(sink2)
            outs1, outs2 = outputs_of(events1), outputs_of(events2)
            assert {o.assignment_id for o in outs1} == {spec1.assignment_id}
            assert {o.assignment_id for o in outs2} == {spec2.assignment_id}
            # Same windows, so min aggregate never exceeds max aggregate.
            for o1, o2 in zip(outs1, outs2):
                assert o1.value <= o2.value
            node.unsubscribe(sink1)
            node.unsubscribe(sink2)

    def test_snapshot_matches_stream(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, _):
            deploy(node, "u1", "agg", "mean(xs)")
            sink = node.subscribe("u1")
            spec = submit(node, "u1", "agg", iterations=2, window=4)
            events = drain_until_terminal(sink)
            snapshot = node.assignment_snapshot(spec.assignment_id)
            assert snapshot["state"] == State.COMPLETED
            assert [o.iteration for o in snapshot["outputs"]] == [0, 1]
            assert snapshot["outputs"] == outputs_of(events)
            node.unsubscribe(sink)

    def test_replay_for_late_subscriber(self, tmp_path):
        with fleet(tmp_path, n_clients=2) as (node, _):
            deploy(node, "u1", "agg", "mean(xs)")
            spec = submit(node, "u1", "agg", iterations=2, window=4)
            assert wait_for(
                lambda: node.assignment_snapshot(spec.assignment_id)["state"]
                == State.COMPLETED,
                timeout=10.0,
            )
            sink = node.subscribe("u1", spec.assignment_id)
            events = drain_until_terminal(sink, timeout=3.0)
            outs = outputs_of(events)
            assert [o.iteration for o in outs] == [0, 1]
            assert terminal_of(events).state == State.COMPLETED
            node.unsubscribe(sink)
