"""Experiment lifecycle: set up, launch, wait, collect, analyse.

Run directory layout (``<results>/runs/<timestamp>/``)::

    experiment.conf  scenario.scn  genesis.json  topology.json  plan.json
    latency.csv      (when a latency matrix is configured)
    <instance-id>/   per-instance working directory and artifacts
    report/          analysis output

Instances are placed round-robin over the configured hosts. When every host
is local, files are written in place and agents are spawned directly; remote
hosts go through a :class:`Transport`.
"""

from __future__ import annotations

import asyncio
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import shutil
import signal
import socket
import subprocess
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .adapter import random_topology
from .analysis import RunResult, parse_run, report
from .broker import BrokerClient, BrokerHub
from .model import (DeploymentPlan, ExperimentConfig, Host, PlacedInstance, Role, account_name,
                    role_of)
from .runtime import (CONFIG_FILE, GENESIS_FILE, MATRIX_FILE, PLAN_FILE, SCENARIO_FILE, TOPOLOGY_FILE,
                      Instance, StopReport)
from .scenario import Scenario, benchmark_scenario
from .workload import TRANSFER_AMOUNT

log = logging.getLogger(__name__)

RESULTS_ENV = "GROMIT_RESULTS_DIR"
EPOCH_LEAD_MS = 500
READY_TIMEOUT_S = 60.0
STOP_SLACK_S = 30.0
REMOTE_BASE_PORT = 7100


class OrchestratorError(RuntimeError):
    pass


class HostUnreachable(OrchestratorError):
    def __init__(self, host, reason: str = ""):
        self.host = host
        super().__init__(f"host {host} unreachable{': ' + reason if reason else ''}")


class SyncFailed(OrchestratorError):
    def __init__(self, host, path, reason: str = ""):
        self.host = host
        self.path = path
        super().__init__(f"sync of {path} to {host} failed{': ' + reason if reason else ''}")


class SpawnFailed(OrchestratorError):
    def __init__(self, instance: int, reason: str = ""):
        self.instance = instance
        super().__init__(f"instance {instance} failed to start{': ' + reason if reason else ''}")


class PartialCollection(UserWarning):
    def __init__(self, missing: dict):
        self.missing = missing
        super().__init__("missing artifacts for instances " + ", ".join(str(i) for i in sorted(missing)))


def results_root(default="results") -> Path:
    return Path(os.environ.get(RESULTS_ENV) or default)


# transport -------------------------------------------------------------------


class Transport:
    """File sync and command execution on experiment hosts."""

    def check(self, host: Host) -> None:
        raise NotImplementedError

    def sync(self, host: Host, local: Path, remote: str) -> None:
        raise NotImplementedError

    def fetch(self, host: Host, remote: str, local: Path) -> None:
        raise NotImplementedError

    def spawn(self, host: Host, argv: list, log_path: str) -> "subprocess.Popen":
        raise NotImplementedError


class LocalTransport(Transport):
    """Everything on this machine: copies and direct process spawning."""

    def check(self, host: Host) -> None:
        if not host.is_local:
            raise HostUnreachable(host, "local transport serves only localhost")

    def sync(self, host: Host, local: Path, remote: str) -> None:
        if Path(remote).resolve() == Path(local).resolve():
            return
        try:
            shutil.copytree(local, remote, dirs_exist_ok=True)
        except OSError as exc:
            raise SyncFailed(host, remote, str(exc)) from exc

    def fetch(self, host: Host, remote: str, local: Path) -> None:
        self.sync(host, Path(remote), str(local))

    def spawn(self, host: Host, argv: list, log_path: str) -> subprocess.Popen:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "ab")
        try:
            return subprocess.Popen(argv, stdout=fh, stderr=fh, start_new_session=True)
        finally:
            fh.close()


class SshTransport(Transport):
    """Delta sync with rsync and command execution over ssh."""

    def __init__(self, ssh: str = "ssh", rsync: str = "rsync", timeout: float = 10.0, runner=subprocess.run):
        self.ssh = ssh
        self.rsync = rsync
        self.timeout = timeout
        self.runner = runner

    def check(self, host: Host) -> None:
        cmd = [self.ssh, "-o", "BatchMode=yes", "-o", f"ConnectTimeout={int(self.timeout)}", host.address, "true"]
        try:
            res = self.runner(cmd, capture_output=True, timeout=self.timeout + 5)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise HostUnreachable(host, str(exc)) from exc
        if res.returncode != 0:
            raise HostUnreachable(host, (res.stderr or b"").decode(errors="replace").strip())

    def _rsync(self, host: Host, src: str, dst: str, path) -> None:
        cmd = [self.rsync, "-az", "--delete", "-e", self.ssh, src, dst]
        try:
            res = self.runner(cmd, capture_output=True)
        except OSError as exc:
            raise SyncFailed(host, path, str(exc)) from exc
        if res.returncode != 0:
            raise SyncFailed(host, path, (res.stderr or b"").decode(errors="replace").strip())

    def sync(self, host: Host, local: Path, remote: str) -> None:
        self._rsync(host, f"{local}/", f"{host.address}:{remote}/", remote)

    def fetch(self, host: Host, remote: str, local: Path) -> None:
        Path(local).mkdir(parents=True, exist_ok=True)
        self._rsync(host, f"{host.address}:{remote}/", f"{local}/", remote)

    def spawn(self, host: Host, argv: list, log_path: str) -> subprocess.Popen:
        import shlex

        remote = " ".join(shlex.quote(a) for a in argv)
        cmd = [self.ssh, host.address, f"{remote} >> {shlex.quote(log_path)} 2>&1"]
        return subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL, start_new_session=True)


def transport_for(config: ExperimentConfig) -> Transport:
    return LocalTransport() if config.is_local else SshTransport()


# planning ------------------------------------------------------------------------


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def place(config: ExperimentConfig) -> dict:
    """Instance ID -> host, round-robin in ID order."""
    hosts = config.hosts
    return {i: hosts[(i - 1) % len(hosts)] for i in range(1, config.n_instances + 1)}


def plan_deployment(config: ExperimentConfig, run_dir) -> DeploymentPlan:
    run_dir = Path(run_dir)
    instances = {}
    for i, host in place(config).items():
        role = role_of(i, config.n_validators)
        if host.is_local:
            workdir = str(run_dir.resolve() / str(i))
        else:
            workdir = f"{host.workdir or '.'}/{run_dir.name}/{i}"
        wallet = peer = 0
        if role is Role.VALIDATOR:
            if host.is_local:
                wallet, peer = free_port(), free_port()
            else:
                wallet, peer = REMOTE_BASE_PORT + 2 * i, REMOTE_BASE_PORT + 2 * i + 1
        instances[i] = PlacedInstance(i, role.value, host, workdir, wallet, peer)
    return DeploymentPlan(str(run_dir.resolve()), instances)


def _secret(seed: int, account: str) -> str:
    return hashlib.sha256(f"fabricbench|{seed}|{account}".encode()).hexdigest()


def generate_genesis(config: ExperimentConfig) -> dict:
    """One funded account per client, deterministic under the seed.

    Each account holds enough for the whole issue window plus a tenth as
    margin (at least 100 units).
    """
    need = math.ceil(config.issue_duration * config.per_client_rate) * TRANSFER_AMOUNT
    balance = need + max(100, need // 10)
    accounts = {account_name(c): {"balance": balance, "secret": _secret(config.rng_seed, account_name(c))}
                for c in config.client_ids}
    return {"seed": config.rng_seed, "accounts": accounts}


def genesis_text(genesis: dict) -> str:
    return json.dumps(genesis, sort_keys=True, indent=1) + "\n"


def new_run_dir(root: Optional[Path] = None) -> Path:
    root = Path(root) if root is not None else results_root()
    stamp = _dt.datetime.now().strftime("%Y-%m-%dT%H-%M-%S.%f")
    d = root / "runs" / stamp
    k = 1
    while d.exists():
        d = root / "runs" / f"{stamp}-{k}"
        k += 1
    return d


def setup(config: ExperimentConfig, scenario: Optional[Scenario] = None, root=None,
          transport: Optional[Transport] = None, run_dir=None) -> DeploymentPlan:
    """Create the run directory, shared files and per-instance directories,
    and push them to every remote host."""
    transport = transport or transport_for(config)
    for host in sorted(set(config.hosts), key=str):
        transport.check(host)
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(root)
    run_dir.mkdir(parents=True, exist_ok=False)
    scenario = scenario or benchmark_scenario(config.n_validators, config.n_clients, config.issue_duration,
                                              config.drain_duration)
    stored = config
    if config.latency_matrix_path:
        shutil.copyfile(config.latency_matrix_path, run_dir / MATRIX_FILE)
        stored = replace(config, latency_matrix_path=str((run_dir / MATRIX_FILE).resolve()))
    (run_dir / CONFIG_FILE).write_text(stored.to_text(), encoding="utf-8")
    (run_dir / SCENARIO_FILE).write_text(scenario.render(), encoding="utf-8")
    (run_dir / GENESIS_FILE).write_text(genesis_text(generate_genesis(config)), encoding="utf-8")
    topo = random_topology(config.n_validators, config.topology_degree, config.rng_seed)
    (run_dir / TOPOLOGY_FILE).write_text(json.dumps(topo.to_json(), sort_keys=True), encoding="utf-8")
    plan = plan_deployment(config, run_dir)
    (run_dir / PLAN_FILE).write_text(json.dumps(plan.to_json(), indent=1), encoding="utf-8")
    for i, p in plan.instances.items():
        if p.host.is_local:
            Path(p.workdir).mkdir(parents=True, exist_ok=True)
    for host in plan.hosts():
        if not host.is_local:
            transport.sync(host, run_dir, f"{host.workdir or '.'}/{run_dir.name}")
    return plan


# launch and wait ----------------------------------------------------------------


@dataclass
class Handle:
    instance: int
    proc: Optional[subprocess.Popen] = None
    task: Optional[asyncio.Task] = None
    agent: Optional[Instance] = None

    def alive(self) -> bool:
        if self.proc is not None:
            return self.proc.poll() is None
        return self.task is not None and not self.task.done()


class Deployment:
    """Running instances of one experiment plus the broker hub."""

    def __init__(self, config: ExperimentConfig, plan: DeploymentPlan, transport: Optional[Transport] = None):
        self.config = config
        self.plan = plan
        self.transport = transport or transport_for(config)
        self.handles: dict = {}
        self.hub: Optional[BrokerHub] = None
        self.client: Optional[BrokerClient] = None
        self.reports: dict = {}
        self.epoch_ms: Optional[int] = None
        self.stopped = False

    def _remote_run_dir(self, host: Host) -> str:
        return str(Path(self.plan.run_dir)) if host.is_local else f"{host.workdir or '.'}/{Path(self.plan.run_dir).name}"

    async def launch(self) -> dict:
        """Start the broker and one agent per instance, then broadcast the epoch.

        If any instance fails to start, every started one is terminated.
        """
        bind = "127.0.0.1" if self.config.is_local else "0.0.0.0"
        self.hub = await BrokerHub(bind, 0).start()
        addr = (self.config.broker_host, self.hub.port)
        self.plan = self.plan.with_broker(*addr)
        self.client = await BrokerClient(*addr, sender=0).connect()
        ready = self.client.subscribe("ready")
        self.client.subscribe("done")
        python = self.config.python or sys.executable
        try:
            for i in sorted(self.plan.instances):
                p = self.plan.instances[i]
                if self.config.launch_mode == "inproc":
                    agent = Instance(i, self.plan.run_dir, addr, launch_mode="inproc")
                    self.handles[i] = Handle(i, task=asyncio.ensure_future(agent.run()), agent=agent)
                    continue
                argv = [python, "-m", "fabricbench.runtime", "--instance", str(i),
                        "--run-dir", self._remote_run_dir(p.host), "--broker", f"{addr[0]}:{addr[1]}"]
                try:
                    proc = self.transport.spawn(p.host, argv, f"{p.workdir}/agent.out")
                except OSError as exc:
                    raise SpawnFailed(i, str(exc)) from exc
                self.handles[i] = Handle(i, proc=proc)
            await self._await_ready(ready)
        except BaseException:
            await self.teardown()
            raise
        now = _now_ms()
        self.epoch_ms = now + EPOCH_LEAD_MS
        await self.client.publish("epoch", json.dumps({"epoch_ms": self.epoch_ms, "sent_ms": now}).encode())
        return self.handles

    async def _await_ready(self, ready: asyncio.Queue) -> None:
        waiting = set(self.plan.instances)
        loop = asyncio.get_running_loop()
        end = loop.time() + READY_TIMEOUT_S
        while waiting:
            for i in sorted(waiting):
                h = self.handles[i]
                if not h.alive():
                    raise SpawnFailed(i, "exited before joining the broker")
            try:
                msg = await asyncio.wait_for(ready.get(), 0.2)
                waiting.discard(msg.sender)
            except asyncio.TimeoutError:
                if loop.time() > end:
                    raise SpawnFailed(min(waiting), f"not ready after {READY_TIMEOUT_S:.0f}s")

    async def wait(self, scenario: Scenario, timeout: Optional[float] = None) -> dict:
        """Wait until every instance reports its stop; returns the reports."""
        if timeout is None:
            timeout = scenario.stop_at * self.config.time_scale + EPOCH_LEAD_MS / 1000 + STOP_SLACK_S
        done_q = self.client.subscribe("done")
        loop = asyncio.get_running_loop()
        end = loop.time() + timeout
        while len(self.reports) < len(self.handles):
            try:
                msg = await asyncio.wait_for(done_q.get(), 0.25)
                self.reports[msg.sender] = StopReport(**json.loads(msg.payload))
                continue
            except asyncio.TimeoutError:
                pass
            for i, h in self.handles.items():
                if i not in self.reports and not h.alive():
                    self.reports[i] = StopReport(i, started=True, errors=["exited without a stop report"])
            if loop.time() > end:
                log.warning("instances %s did not stop in time", sorted(set(self.handles) - set(self.reports)))
                break
        return self.reports

    async def teardown(self, deadline: float = 10.0) -> None:
        """Stop clients, then validators, then the broker. Safe to repeat."""
        if self.stopped:
            return
        self.stopped = True
        for group in (self.plan.clients, self.plan.validators):
            live = [self.handles[i] for i in group if i in self.handles and self.handles[i].alive()]
            for h in live:
                if h.proc is not None:
                    try:
                        h.proc.send_signal(signal.SIGTERM)
                    except ProcessLookupError:
                        pass
                else:
                    h.agent.request_stop()
            loop = asyncio.get_running_loop()
            end = loop.time() + deadline
            while any(h.alive() for h in live) and loop.time() < end:
                await asyncio.sleep(0.05)
            for h in live:
                if h.proc is not None and h.proc.poll() is None:
                    _kill_group(h.proc)
                elif h.task is not None and not h.task.done():
                    h.task.cancel()
        for h in self.handles.values():
            if h.proc is not None:
                try:
                    h.proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    _kill_group(h.proc)
            elif h.task is not None:
                await asyncio.gather(h.task, return_exceptions=True)
        if self.client is not None:
            await self.client.close()
        if self.hub is not None:
            await self.hub.stop()


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            proc.kill()
        except ProcessLookupError:
            pass
    proc.wait()


def _now_ms() -> int:
    import time

    return int(time.time() * 1000)


# collection ----------------------------------------------------------------------


EXPECTED = {
    Role.VALIDATOR.value: ("ledger.jsonl", "metrics.csv", "instance.log", "dispatch.csv"),
    Role.CLIENT.value: ("submissions.csv", "metrics.csv", "instance.log", "dispatch.csv"),
}


@dataclass
class ArtifactBundle:
    run_dir: Path
    files: dict  # instance -> {name: path}
    missing: dict = field(default_factory=dict)  # instance -> [names]

    def path(self, instance: int, name: str) -> Optional[Path]:
        return self.files.get(instance, {}).get(name)


def collect(plan: DeploymentPlan, transport: Optional[Transport] = None) -> ArtifactBundle:
    """Bring every instance's artifacts into the local run directory and
    index them by instance; missing ones are reported, not fatal."""
    import warnings

    run_dir = Path(plan.run_dir)
    transport = transport or LocalTransport()
    files, missing = {}, {}
    for i in sorted(plan.instances):
        p = plan.instances[i]
        local = run_dir / str(i)
        if not p.host.is_local:
            try:
                transport.fetch(p.host, p.workdir, local)
            except SyncFailed as exc:
                log.warning("%s", exc)
        found = {f.name: f for f in local.iterdir()} if local.exists() else {}
        files[i] = found
        lacking = [n for n in EXPECTED[p.role] if n not in found]
        if lacking:
            missing[i] = lacking
    if missing:
        warnings.warn(PartialCollection(missing))
        log.warning("%s", PartialCollection(missing))
    return ArtifactBundle(run_dir, files, missing)


# end to end ----------------------------------------------------------------------


@dataclass
class ExperimentResult:
    run_dir: Path
    plan: DeploymentPlan
    bundle: ArtifactBundle
    run: RunResult
    reports: dict
    report_files: dict = field(default_factory=dict)

    @property
    def forced(self) -> list:
        return sorted(i for i, r in self.reports.items() if r.forced)


async def run_experiment_async(config: ExperimentConfig, scenario: Optional[Scenario] = None, root=None,
                               transport: Optional[Transport] = None, setting: str = "",
                               charts: bool = False) -> ExperimentResult:
    scenario = scenario or benchmark_scenario(config.n_validators, config.n_clients, config.issue_duration,
                                              config.drain_duration)
    transport = transport or transport_for(config)
    plan = setup(config, scenario, root, transport)
    if setting:
        (Path(plan.run_dir) / "setting").write_text(setting + "\n")
    dep = Deployment(config, plan, transport)
    try:
        await dep.launch()
        # record the broker address the agents actually used
        (Path(plan.run_dir) / PLAN_FILE).write_text(json.dumps(dep.plan.to_json(), indent=1))
        await dep.wait(scenario)
    finally:
        await dep.teardown()
    bundle = collect(dep.plan, transport)
    run = parse_run(plan.run_dir, setting or f"rate={config.tx_rate:g}")
    errors = {i: r.errors for i, r in dep.reports.items() if r.errors}
    if errors:
        run.integrity["instance_errors"] = {str(k): v for k, v in errors.items()}
    files = report({run.setting: [run]}, Path(plan.run_dir) / "report", charts=charts)
    return ExperimentResult(Path(plan.run_dir), dep.plan, bundle, run, dep.reports, files)


def run_experiment(config: ExperimentConfig, scenario: Optional[Scenario] = None, root=None,
                   transport: Optional[Transport] = None, setting: str = "",
                   charts: bool = False) -> ExperimentResult:
    """setup, launch, wait for stop, collect, parse and report one run."""
    return asyncio.run(run_experiment_async(config, scenario, root, transport, setting, charts))
