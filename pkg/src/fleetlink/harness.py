"""Desk-scale evaluation harness.

Orchestrates a real cloud process plus N client processes on localhost,
measures hot module replacement against restart-based redeployment, and
drives the inconsistent-update scenario with injected CODE_PUSH delays.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .cloud.filtering import majority_filter
from .errors import FleetError, ValidationError
from .frontend import HttpGateway
from .netio import pick_free_port, wait_for
from .protocol import (
    CodeModule,
    ResultRecord,
    State,
    compute_signature,
    now_ms,
)

DEFAULT_RUNS = 5
DEFAULT_CLIENTS = 5


@dataclass
class BenchReport:
    scenario: str
    runs: list[float]  # per-run latency, ms
    ratio_vs_baseline: float | None = None

    @property
    def mean(self) -> float:
        return sum(self.runs) / len(self.runs) if self.runs else float("nan")

    def to_dict(self) -> dict:
        out = {"scenario": self.scenario, "runs_ms": self.runs, "mean_ms": self.mean}
        if self.ratio_vs_baseline is not None:
            out["ratio_vs_baseline"] = self.ratio_vs_baseline
        return out


def render_table(reports: list[BenchReport]) -> str:
    lines = [f"{'scenario':<34} {'mean ms':>12} {'runs':>6}  ratio"]
    for report in reports:
        ratio = f"{report.ratio_vs_baseline:.1f}x" if report.ratio_vs_baseline else "-"
        lines.append(
            f"{report.scenario:<34} {report.mean:>12.1f} {len(report.runs):>6}  {ratio}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Process orchestration
# ---------------------------------------------------------------------------


@dataclass
class FleetProcs:
    """Owns the cloud and client OS processes for one fleet."""

    workdir: Path
    n_clients: int = DEFAULT_CLIENTS
    rate: float = 100.0
    heartbeat_ms: int = 1000
    ack_timeout_ms: int = 5000
    iteration_timeout_ms: int = 10000
    fault_injection: bool = False
    seed_base: int = 1000
    client_port: int = 0
    gateway_port: int = 0
    cloud_proc: subprocess.Popen | None = None
    client_procs: list[subprocess.Popen] = field(default_factory=list)

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        if not self.client_port:
            self.client_port = pick_free_port()
        if not self.gateway_port:
            self.gateway_port = pick_free_port()

    @property
    def gateway_address(self) -> str:
        return f"127.0.0.1:{self.gateway_port}"

    @property
    def gateway_url(self) -> str:
        return f"http://{self.gateway_address}"

    def gateway(self) -> HttpGateway:
        return HttpGateway(self.gateway_address)

    def client_ids(self) -> list[str]:
        return [f"bench-c{i}" for i in range(self.n_clients)]

    def _config_path(self) -> Path:
        path = self.workdir / "cloud-config.json"
        path.write_text(
            json.dumps(
                {
                    "client_port": self.client_port,
                    "gateway_port": self.gateway_port,
                    "module_root": str(self.workdir / "cloud-modules"),
                    "ack_timeout_ms": self.ack_timeout_ms,
                    "iteration_timeout_ms": self.iteration_timeout_ms,
                    "heartbeat_ms": self.heartbeat_ms,
                    "fault_injection": self.fault_injection,
                }
            ),
            encoding="utf-8",
        )
        return path

    def launch(self, timeout: float = 30.0) -> None:
        config = self._config_path()
        cloud_log = open(self.workdir / "cloud.log", "ab")
        self.cloud_proc = subprocess.Popen(
            [sys.executable, "-m", "fleetlink.cloud.main", "--config", str(config),
             "--log-level", "warning"],
            stdout=cloud_log, stderr=subprocess.STDOUT,
        )
        self.client_procs = []
        for i, client_id in enumerate(self.client_ids()):
            client_log = open(self.workdir / f"{client_id}.log", "ab")
            proc = subprocess.Popen(
                [
                    sys.executable, "-m", "fleetlink.client",
                    "--id", client_id,
                    "--cloud", f"127.0.0.1:{self.client_port}",
                    "--seed", str(self.seed_base + i),
                    "--rate", str(self.rate),
                    "--module-root", str(self.workdir / f"{client_id}-modules"),
                    "--heartbeat-ms", str(self.heartbeat_ms),
                    "--log-level", "warning",
                ],
                stdout=client_log, stderr=subprocess.STDOUT,
            )
            self.client_procs.append(proc)
        if not self.wait_ready(timeout):
            raise FleetError(
                f"fleet failed to become ready within {timeout}s "
                f"(see logs under {self.workdir})"
            )

    def wait_ready(self, timeout: float = 30.0) -> bool:
        expected = set(self.client_ids())

        def ready() -> bool:
            try:
                response = requests.get(self.gateway_url + "/clients", timeout=1.0)
            except requests.exceptions.RequestException:
                return False
            if response.status_code != 200:
                return False
            connected = {
                c["client_id"] for c in response.json()["clients"] if c["connected"]
            }
            return expected <= connected

        return wait_for(ready, timeout, interval=0.05)

    def kill(self) -> None:
        """Hard-stop every process, as a crash or forced redeploy would."""
        procs = ([self.cloud_proc] if self.cloud_proc else []) + self.client_procs
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        for proc in procs:
            proc.wait(timeout=10)
        self.cloud_proc = None
        self.client_procs = []

    def shutdown(self) -> None:
        procs = ([self.cloud_proc] if self.cloud_proc else []) + self.client_procs
        for proc in procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=5)
        self.cloud_proc = None
        self.client_procs = []

    def set_fault_delays(self, delays: dict[str, float]) -> None:
        response = requests.post(
            self.gateway_url + "/_fault/delays", json={"delays": delays}, timeout=5.0
        )
        response.raise_for_status()


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def _deploy_payload(user: str, name: str, code: str, target: str) -> dict:
    return {
        "user_id": user,
        "target": target,
        "target_clients": [],
        "module": {
            "user_id": user,
            "name": name,
            "code": code,
            "signature": compute_signature(code),
            "deployed_at": now_ms(),
        },
    }


def bench_replacement(fleet: FleetProcs, n_runs: int = DEFAULT_RUNS) -> dict[str, BenchReport]:
    """Hot-replacement latency: deploy start to DEPLOYED status, per target."""
    gateway = fleet.gateway()
    # One untimed warmup so connection setup does not land in the first run.
    gateway.deploy(_deploy_payload("bench", "bench_warmup", "mean(xs)", "CLOUD"))
    reports: dict[str, BenchReport] = {}
    for target, label in (("CLOUD", "replacement-cloud"), ("CLIENTS", "replacement-client")):
        runs: list[float] = []
        for run in range(n_runs):
            # Unique code per run so every deployment is a real new version.
            code = f"mean(xs) + 0 * {run + 1}"
            payload = _deploy_payload("bench", f"bench_{target.lower()}", code, target)
            started = time.perf_counter()
            status = gateway.deploy(payload)
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            if status["state"] != State.DEPLOYED:
                raise FleetError(
                    f"deployment failed during {label} run {run}: {status['detail']}"
                )
            runs.append(elapsed_ms)
        reports[target] = BenchReport(scenario=label, runs=runs)
    return reports


def bench_redeploy(
    fleet: FleetProcs, n_runs: int = DEFAULT_RUNS, baseline_mean_ms: float | None = None
) -> BenchReport:
    """Restart-based baseline: kill everything, relaunch, wait for re-registration."""
    runs: list[float] = []
    for _ in range(n_runs):
        if not fleet.wait_ready(timeout=10.0):
            raise FleetError("fleet not healthy before a redeploy run")
        started = time.perf_counter()
        fleet.kill()
        fleet.launch(timeout=60.0)
        runs.append((time.perf_counter() - started) * 1000.0)
    ratio = None
    if baseline_mean_ms:
        ratio = (sum(runs) / len(runs)) / baseline_mean_ms
    return BenchReport(scenario="restart-redeploy", runs=runs, ratio_vs_baseline=ratio)


# ---------------------------------------------------------------------------
# Inconsistent-update scenario
# ---------------------------------------------------------------------------


def find_signature_transition(outputs: list[dict]) -> tuple[int, str, str]:
    """Locate the (single) accepted-signature flip in an output trace.

    Returns (iteration, old_signature, new_signature). Raises if the trace
    mixes more than two signatures or flips more than once.
    """
    signatures = [o["accepted_signature"] for o in outputs]
    distinct = sorted(set(signatures))
    if len(distinct) == 1:
        raise ValidationError("trace never changed signature")
    if len(distinct) > 2:
        raise ValidationError(f"trace carries {len(distinct)} signatures: {distinct}")
    old = signatures[0]
    flips = [
        outputs[i]["iteration"]
        for i in range(1, len(signatures))
        if signatures[i] != signatures[i - 1]
    ]
    if len(flips) != 1:
        raise ValidationError(f"expected exactly one signature flip, got {flips}")
    new = next(s for s in signatures if s != old)
    return flips[0], old, new


def scenario_inconsistent_update(
    fleet: FleetProcs,
    delayed_clients: int = 2,
    iterations: int = 20,
    window: int = 20,
    trigger_iteration: int = 5,
    user: str = "analyst",
) -> dict:
    """Deploy v2 mid-run with CODE_PUSH delayed one full iteration to a subset
    of clients, then check the no-mixing invariant over the whole trace."""
    if not fleet.fault_injection:
        raise ValidationError("fleet must run with fault_injection enabled")
    gateway = fleet.gateway()
    iteration_ms = window / fleet.rate * 1000.0

    v1 = "mean(xs)"
    v2 = "mean(xs) + 0 * 99"
    status = gateway.deploy(_deploy_payload(user, "scenario", v1, "BOTH"))
    if status["state"] != State.DEPLOYED:
        raise FleetError(f"v1 deployment failed: {status['detail']}")

    assignment_id = gateway.submit(
        {
            "user_id": user,
            "method": "CUSTOM",
            "custom_module": "scenario",
            "target_clients": [],
            "iterations": iterations,
            "window_size": window,
            "params": {},
        }
    )["assignment_id"]

    def output_count() -> int:
        return len(gateway.assignment(assignment_id)["outputs"])

    if not wait_for(lambda: output_count() > trigger_iteration, timeout=60.0, interval=0.02):
        raise FleetError("assignment produced no outputs to trigger on")

    delayed = fleet.client_ids()[-delayed_clients:] if delayed_clients else []
    fleet.set_fault_delays({c: iteration_ms for c in delayed})
    try:
        status = gateway.deploy(_deploy_payload(user, "scenario", v2, "BOTH"))
        if status["state"] != State.DEPLOYED:
            raise FleetError(f"v2 deployment failed: {status['detail']}")
    finally:
        fleet.set_fault_delays({})

    if not wait_for(
        lambda: gateway.assignment(assignment_id)["state"] == State.COMPLETED,
        timeout=iterations * iteration_ms / 1000.0 + 60.0,
        interval=0.1,
    ):
        raise FleetError("assignment did not complete")

    detail = gateway.assignment(assignment_id)
    outputs = detail["outputs"]
    transition, old_sig, new_sig = find_signature_transition(outputs)
    report = {
        "assignment_id": assignment_id,
        "v1_signature": compute_signature(v1),
        "v2_signature": compute_signature(v2),
        "transition_iteration": transition,
        "delayed_clients": delayed,
        "trace": [
            {
                "iteration": o["iteration"],
                "accepted_signature": o["accepted_signature"],
                "accepted_count": o["accepted_count"],
                "discarded_count": o["discarded_count"],
            }
            for o in outputs
        ],
        "total_outputs": len(outputs),
    }
    checks = {
        "signatures_match_deployments": (
            old_sig == report["v1_signature"] and new_sig == report["v2_signature"]
        ),
        "every_output_single_signature": True,  # by wire shape; counts below
        "transition_accepts_majority": any(
            o["iteration"] == transition
            and o["accepted_count"] == fleet.n_clients - len(delayed)
            and o["discarded_count"] == len(delayed)
            for o in outputs
        ) if delayed else True,
        "other_iterations_clean": all(
            o["discarded_count"] == 0
            for o in outputs
            if o["iteration"] != transition
        ),
        "all_iterations_emitted": len(outputs) == iterations,
    }
    report["checks"] = checks
    report["ok"] = all(checks.values())
    return report


# ---------------------------------------------------------------------------
# Delay-profile property sweep (simulated delivery, real filter)
# ---------------------------------------------------------------------------


def sweep_delay_profiles(
    n_profiles: int = 100,
    n_clients: int = 5,
    iterations: int = 20,
    seed: int = 2024,
) -> dict:
    """Randomized delay profiles driven through the production majority
    filter. The delivery model: a push lands mid-run, per-client arrival is
    shifted by that client's random delay, and a client's iteration uses v2
    exactly when the push arrived before that iteration's boundary load."""
    rng = random.Random(seed)
    sig_v1 = compute_signature("mean(xs)")
    sig_v2 = compute_signature("mean(xs) + 0 * 99")
    mixed_outputs = 0
    discarded_iterations = 0
    total_outputs = 0
    for _ in range(n_profiles):
        deploy_at = rng.uniform(1.0, iterations - 3.0)  # in iteration units
        first_v2: dict[str, int] = {}
        for c in range(n_clients):
            delay = rng.choice([0.0, 0.0, 0.5, 1.0, 1.5, 2.0, rng.uniform(0, 3)])
            arrival = deploy_at + delay
            # Iteration i loads at time i+1; v2 is active from the first
            # iteration whose boundary load follows the arrival.
            first_v2[f"c{c}"] = max(0, math.ceil(arrival) - 1)
        for iteration in range(iterations):
            bucket = [
                ResultRecord(
                    assignment_id="sweep",
                    client_id=f"c{c}",
                    iteration=iteration,
                    value=1.0,
                    signature=sig_v2 if iteration >= first_v2[f"c{c}"] else sig_v1,
                    produced_at=0,
                )
                for c in range(n_clients)
            ]
            current = sig_v2 if iteration + 1 >= deploy_at else sig_v1
            accepted, signature, discarded = majority_filter(bucket, current)
            if signature is None:
                discarded_iterations += 1
                continue
            total_outputs += 1
            if len({r.signature for r in accepted}) != 1:
                mixed_outputs += 1
    return {
        "profiles": n_profiles,
        "clients": n_clients,
        "iterations": iterations,
        "outputs": total_outputs,
        "mixed_outputs": mixed_outputs,
        "discarded_iterations": discarded_iterations,
    }


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _write_report(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("replacement", "redeploy", "inconsistent"):
        p = sub.add_parser(name)
        p.add_argument("--clients", type=int, default=DEFAULT_CLIENTS)
        p.add_argument("--runs", type=int, default=DEFAULT_RUNS)
        p.add_argument("--out", default=None, help="write the JSON report here")
        p.add_argument("--workdir", default=None)
        if name == "inconsistent":
            p.add_argument("--delayed", type=int, default=2)
            p.add_argument("--iterations", type=int, default=20)
            p.add_argument("--window", type=int, default=20)
            p.add_argument("--rate", type=float, default=50.0)
            p.add_argument("--sweep", type=int, default=100)
    args = parser.parse_args(argv)

    import tempfile

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="fleet-bench-"))
    fleet = FleetProcs(
        workdir=workdir,
        n_clients=args.clients,
        rate=getattr(args, "rate", 100.0),
        fault_injection=args.command == "inconsistent",
    )
    print(f"launching fleet ({args.clients} clients) under {workdir}", flush=True)
    fleet.launch()
    try:
        if args.command == "replacement":
            reports = bench_replacement(fleet, args.runs)
            print(render_table(list(reports.values())))
            _write_report(args.out, {k: r.to_dict() for k, r in reports.items()})
        elif args.command == "redeploy":
            hot = bench_replacement(fleet, args.runs)
            baseline = hot["CLIENTS"].mean
            restart = bench_redeploy(fleet, args.runs, baseline_mean_ms=baseline)
            print(render_table([hot["CLOUD"], hot["CLIENTS"], restart]))
            _write_report(
                args.out,
                {
                    "replacement_cloud": hot["CLOUD"].to_dict(),
                    "replacement_client": hot["CLIENTS"].to_dict(),
                    "restart_redeploy": restart.to_dict(),
                },
            )
        else:
            report = scenario_inconsistent_update(
                fleet,
                delayed_clients=args.delayed,
                iterations=args.iterations,
                window=args.window,
            )
            sweep = sweep_delay_profiles(args.sweep, args.clients, args.iterations)
            report["sweep"] = sweep
            ok = report["ok"] and sweep["mixed_outputs"] == 0
            print(json.dumps(report, indent=2))
            _write_report(args.out, report)
            return 0 if ok else 1
    finally:
        fleet.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
