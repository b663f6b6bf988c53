"""Per-instance agent.

One agent runs for every validator and client in an experiment. It joins the
broker, waits for the shared epoch, then dispatches its share of the scenario:
validators drive the fabric through the adapter, clients run the workload.
Every agent writes into its own working directory::

    instance.log      log of this agent
    dispatch.csv      one row per dispatched scenario action
    heartbeat.csv     one row per heartbeat
    metrics.csv       resource samples
    submissions.csv   clients: every submitted transaction
    polls.csv         clients with polling enabled: poll-derived outcomes

Broker topics: ``ready`` (agent -> orchestrator), ``epoch`` (orchestrator ->
agents), ``accounts`` (lowest validator -> clients), ``done`` (agent ->
orchestrator, carrying the stop report).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .adapter import Topology, get_adapter
from .analysis import ConfirmationPoller
from .broker import BrokerClient
from .model import DeploymentPlan, ExperimentConfig, Role, account_name, assign_validator
from .scenario import ActionRegistry, DispatchRecord, parse_scenario, schedule
from .telemetry import Sampler, SampleUnavailable, monitor_loop
from .workload import ClientLoad

log = logging.getLogger(__name__)

CONFIG_FILE = "experiment.conf"
SCENARIO_FILE = "scenario.scn"
GENESIS_FILE = "genesis.json"
TOPOLOGY_FILE = "topology.json"
PLAN_FILE = "plan.json"
MATRIX_FILE = "latency.csv"

EPOCH_TIMEOUT_S = 60.0
CREDENTIALS_TIMEOUT_S = 30.0


@dataclass
class StopReport:
    instance: int
    forced: bool = False
    started: bool = True
    errors: list = field(default_factory=list)

    def to_json(self) -> bytes:
        return json.dumps(asdict(self)).encode()


class Instance:
    """The agent for one instance ID of a run directory."""

    def __init__(self, instance_id: int, run_dir, broker: tuple, launch_mode: Optional[str] = None):
        self.id = instance_id
        self.run_dir = Path(run_dir)
        self.broker_addr = broker
        self.config = ExperimentConfig.load(self.run_dir / CONFIG_FILE)
        if (self.run_dir / MATRIX_FILE).exists():
            from dataclasses import replace

            self.config = replace(self.config, latency_matrix_path=str(self.run_dir / MATRIX_FILE))
        self.plan = DeploymentPlan.from_json(json.loads((self.run_dir / PLAN_FILE).read_text()))
        self.placed = self.plan.instances[instance_id]
        self.role = Role(self.placed.role)
        self.workdir = Path(self.placed.workdir)
        self.launch_mode = launch_mode or self.config.launch_mode
        self.scenario = parse_scenario((self.run_dir / SCENARIO_FILE).read_text(encoding="utf-8"),
                                       all_instances=sorted(self.plan.instances))
        self.epoch_ms: Optional[int] = None
        self.halt = asyncio.Event()
        self.broker: Optional[BrokerClient] = None
        self.adapter = None
        self.wallet = None
        self.secret: Optional[bytes] = None
        self.load: Optional[ClientLoad] = None
        self.poller: Optional[ConfirmationPoller] = None
        self.report: Optional[StopReport] = None
        self._load_task = None
        self._poll_task = None
        self._poll_stop = asyncio.Event()
        self._bg_stop = asyncio.Event()
        self._bg_tasks: list = []
        self._dispatch_fh = None
        self._log_handler = None
        self.log = logging.getLogger(f"fabricbench.instance.{instance_id}")
        self.registry = self._actions()

    # setup -------------------------------------------------------------------

    def _open_logs(self) -> None:
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._log_handler = logging.FileHandler(self.workdir / "instance.log", encoding="utf-8")
        self._log_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        self.log.addHandler(self._log_handler)
        self.log.setLevel(logging.INFO)
        self.log.propagate = False
        self._dispatch_fh = open(self.workdir / "dispatch.csv", "w", encoding="utf-8")
        self._dispatch_fh.write(DispatchRecord.CSV_HEADER + "\n")

    def _adapter(self):
        if self.adapter is None:
            from .reffabric import AdapterContext

            ctx = AdapterContext(self.id, self.workdir, self.plan, self.epoch_ms, self.launch_mode,
                                 self.config.python)
            self.adapter = get_adapter(self.config.adapter)(ctx)
        return self.adapter

    def _on_record(self, rec: DispatchRecord) -> None:
        self._dispatch_fh.write(rec.csv_row() + "\n")
        self._dispatch_fh.flush()
        self.log.info("dispatched %s at %d ms (late %d ms)%s", rec.action, rec.dispatched_ms, rec.lateness_ms,
                      "" if rec.ok else " error: " + rec.error)

    # actions ---------------------------------------------------------------

    def _actions(self) -> ActionRegistry:
        reg = ActionRegistry()
        reg.register("init_blockchain_config", self.init_blockchain_config)
        reg.register("start_validator", self.start_validator)
        reg.register("stop_validator", self.stop_validator)
        reg.register("start_client", self.start_client)
        reg.register("start_creating_transactions", self.start_creating_transactions)
        reg.register("stop", lambda act: self.halt.set())
        return reg

    def _require(self, role: Role, action: str) -> None:
        if self.role is not role:
            raise RuntimeError(f"{action} is a {role.value} action but instance {self.id} is a {self.role.value}")

    def init_blockchain_config(self, act=None) -> None:
        self._require(Role.VALIDATOR, "init_blockchain_config")
        topology = Topology.from_json(json.loads((self.run_dir / TOPOLOGY_FILE).read_text()))
        genesis = json.loads((self.run_dir / GENESIS_FILE).read_text())
        self._adapter().init_configuration(self.config, topology, genesis)

    async def start_validator(self, act=None) -> None:
        self._require(Role.VALIDATOR, "start_validator")
        await self._adapter().start_validator(self.id)
        if self.id == min(self.plan.validators):
            genesis = json.loads((self.run_dir / GENESIS_FILE).read_text())
            creds = {name: a["secret"] for name, a in genesis["accounts"].items()}
            await self.broker.publish("accounts", json.dumps(creds, sort_keys=True).encode())

    async def stop_validator(self, act=None) -> Optional[bool]:
        self._require(Role.VALIDATOR, "stop_validator")
        if self.adapter is None:
            return None
        return await self.adapter.stop_validator(self.id)

    async def start_client(self, act=None) -> None:
        self._require(Role.CLIENT, "start_client")
        from .reffabric.wallet import WalletClient

        target = self.plan.instances[assign_validator(self.id, self.config.n_validators)]
        self.wallet = await WalletClient(target.connect_address, target.wallet_port).connect()
        msg = await self.broker.wait_for("accounts", CREDENTIALS_TIMEOUT_S)
        creds = json.loads(msg.payload)
        self.secret = bytes.fromhex(creds[account_name(self.id)])
        self.log.info("client %d bound to validator %d", self.id, target.id)

    def _client_link_delay(self) -> float:
        if not (self.config.delay_client_links and self.config.latency_matrix_path):
            return 0.0
        from .netshape import LatencyMatrix

        matrix = LatencyMatrix.load(self.config.latency_matrix_path)
        k = len(matrix.cities)
        mine = (self.id - 1) % k
        theirs = (assign_validator(self.id, self.config.n_validators) - 1) % k
        return matrix.rtt_ms[mine][theirs] / 2.0

    def start_creating_transactions(self, act=None) -> None:
        self._require(Role.CLIENT, "start_creating_transactions")
        if self.wallet is None or self.secret is None:
            raise RuntimeError("start_client has not completed")
        on_submit = None
        if self.config.poll_interval_ms > 0:
            self.poller = ConfirmationPoller(self.wallet, self.epoch_ms, self.config.poll_interval_ms)
            on_submit = lambda s: self.poller.track(s.tx_id, s.submit_ts)  # noqa: E731
            self._poll_task = asyncio.ensure_future(self.poller.run(self._poll_stop))
        self.load = ClientLoad(self.id, self.config, self.wallet, self.secret, self.epoch_ms,
                               link_delay_ms=self._client_link_delay(), on_submit=on_submit)
        self._load_task = asyncio.ensure_future(self.load.run())

    # background tasks --------------------------------------------------------

    async def _heartbeat(self) -> None:
        with open(self.workdir / "heartbeat.csv", "w", encoding="utf-8") as fh:
            fh.write("ts_ms\n")
            while True:
                fh.write(f"{int(time.time() * 1000) - self.epoch_ms}\n")
                fh.flush()
                if self._bg_stop.is_set():
                    return
                try:
                    await asyncio.wait_for(self._bg_stop.wait(), self.config.heartbeat_interval_ms / 1000.0)
                except asyncio.TimeoutError:
                    pass

    def _pids(self) -> list:
        pids = [os.getpid()]
        if self.adapter is not None:
            pids.extend(self.adapter.child_pids())
        return pids

    def _net(self) -> Optional[tuple]:
        if self.adapter is not None:
            return self.adapter.net_counters()
        if self.wallet is not None:
            return self.wallet.bytes_in, self.wallet.bytes_out
        return None

    def _start_background(self) -> None:
        self._bg_tasks.append(asyncio.ensure_future(self._heartbeat()))
        try:
            sampler = Sampler(self.id, self.workdir, self.epoch_ms, self._net)
        except SampleUnavailable as exc:
            self.log.warning("resource sampling disabled: %s", exc)
            return
        self._bg_tasks.append(asyncio.ensure_future(
            monitor_loop(sampler, self._pids, self.workdir / "metrics.csv",
                         self.config.telemetry_interval_ms, self._bg_stop)))

    # lifecycle -------------------------------------------------------------

    def request_stop(self) -> None:
        self.halt.set()

    async def _await_epoch(self) -> Optional[int]:
        q = self.broker.subscribe("epoch")
        await self.broker.publish("ready", json.dumps({"instance": self.id, "pid": os.getpid()}).encode())
        getter = asyncio.ensure_future(q.get())
        halted = asyncio.ensure_future(self.halt.wait())
        done, _ = await asyncio.wait({getter, halted}, timeout=EPOCH_TIMEOUT_S,
                                     return_when=asyncio.FIRST_COMPLETED)
        halted.cancel()
        if getter not in done:
            getter.cancel()
            return None
        info = json.loads(getter.result().payload)
        skew = int(time.time() * 1000) - int(info["sent_ms"])
        if abs(skew) > self.config.fabric_params.round_duration / 4:
            self.log.warning("clock skew to orchestrator %d ms exceeds a quarter round", skew)
        return int(info["epoch_ms"])

    async def run(self) -> StopReport:
        """Join, run the schedule, stop and report."""
        self._open_logs()
        try:
            self.broker = await BrokerClient(*self.broker_addr, sender=self.id).connect()
            self.epoch_ms = await self._await_epoch()
            if self.epoch_ms is None:
                self.log.warning("no epoch received; exiting")
                return await self.graceful_stop(started=False)
            self.log.info("instance %d (%s) epoch %d", self.id, self.role.value, self.epoch_ms)
            self._start_background()
            result = await schedule(self.scenario, self.id, self.registry, self.epoch_ms,
                                    self.config.time_scale, self.halt, self._on_record)
            errors = [f"{r.action}: {r.error}" for r in result.errors]
            return await self.graceful_stop(errors=errors)
        except Exception as exc:  # noqa: BLE001 - always stop and report
            self.log.exception("instance %d failed", self.id)
            return await self.graceful_stop(errors=[f"{type(exc).__name__}: {exc}"])

    async def graceful_stop(self, deadline: float = 10.0, started: bool = True,
                            errors: Optional[list] = None) -> StopReport:
        """Halt the schedule, stop the system under test and flush every log.

        The validator gets ``deadline`` seconds to exit before it is killed.
        Calling this again returns the first report.
        """
        if self.report is not None:
            return self.report
        self.halt.set()
        report = StopReport(self.id, started=started and self.epoch_ms is not None, errors=list(errors or []))
        self.report = report
        if self._load_task is not None and not self._load_task.done():
            self._load_task.cancel()
            report.errors.append("issue window cut short by stop")
        if self._poll_task is not None:
            self._poll_stop.set()
            try:
                await asyncio.wait_for(self._poll_task, 5.0)
            except (asyncio.TimeoutError, ConnectionError):
                pass
        if self.load is not None:
            self.load.log.write(self.workdir / "submissions.csv")
            late = self.load.log.lateness_ms
            if late:
                self.log.info("%d ticks ran late, worst %d ms", len(late), max(late))
        elif self.role is Role.CLIENT and self.workdir.exists():
            (self.workdir / "submissions.csv").write_text("tx_id,client_id,validator_id,submit_ts_ms,status\n")
        if self.poller is not None:
            self.poller.write(self.workdir / "polls.csv")
        if self.wallet is not None:
            await self.wallet.close()
        if self.adapter is not None and self.role is Role.VALIDATOR:
            try:
                forced = await self.adapter.stop_validator(self.id, deadline)
                report.forced = bool(forced)
            except Exception as exc:  # noqa: BLE001 - best effort
                report.errors.append(f"stop_validator: {exc}")
        self._bg_stop.set()
        if self._bg_tasks:
            await asyncio.gather(*self._bg_tasks, return_exceptions=True)
        if self.broker is not None:
            try:
                await self.broker.publish("done", report.to_json())
            except ConnectionError as exc:
                self.log.warning("could not report stop: %s", exc)
            await self.broker.close()
        self.log.info("instance %d stopped (forced=%s)", self.id, report.forced)
        if self._dispatch_fh is not None:
            self._dispatch_fh.close()
        if self._log_handler is not None:
            self._log_handler.flush()
            self.log.removeHandler(self._log_handler)
            self._log_handler.close()
        return report


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="run one benchmark instance")
    ap.add_argument("--instance", type=int, required=True, help="instance ID")
    ap.add_argument("--run-dir", required=True, help="run directory holding the shared experiment files")
    ap.add_argument("--broker", required=True, help="broker address host:port")
    args = ap.parse_args(argv)
    host, _, port = args.broker.rpartition(":")

    async def run() -> StopReport:
        inst = Instance(args.instance, args.run_dir, (host, int(port)), launch_mode="process")
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, inst.request_stop)
        return await inst.run()

    report = asyncio.run(run())
    return 0 if not report.errors else 1


if __name__ == "__main__":
    sys.exit(main())
