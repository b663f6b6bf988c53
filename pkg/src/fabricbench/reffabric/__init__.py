"""Built-in reference transaction fabric and its adapter.

A round-based replicated ledger with a deterministic rotating leader: round
``r`` lasts ``R`` ms from the shared epoch, its leader ``(r mod n) + 1``
drains up to ``B`` pooled transactions into a block. Throughput is bounded by
``B / R`` and confirmation latency under light load lies in ``(0, R + g]``,
``g`` being the gossip delay to the leader.
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import signal
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..adapter import AdapterError, SystemAdapter, Topology, register_adapter
from ..model import ExperimentConfig, TxOutcome, TxStatus
from .ledger import Block, FabricState, InvalidBlock, read_ledger, verify_chain  # noqa: F401

log = logging.getLogger(__name__)

SPEC_FILE = "fabric.json"


@dataclass
class AdapterContext:
    """What an adapter needs to know about the instance hosting it."""

    instance: int
    workdir: Path
    plan: object  # DeploymentPlan
    epoch_ms: int
    launch_mode: str = "process"
    python: str = ""


def fabric_spec(config: ExperimentConfig, topology: Topology, genesis: dict, plan) -> dict:
    from ..netshape import LatencyMatrix, delay_table

    delays: dict = {}
    if config.latency_matrix_path:
        matrix = LatencyMatrix.load(config.latency_matrix_path)
        for (a, b), d in delay_table(config.n_validators, matrix).items():
            if d > 0:
                delays.setdefault(str(a), {})[str(b)] = d
    validators = {}
    for v in plan.validators:
        p = plan.instances[v]
        validators[str(v)] = {"host": p.connect_address, "bind": p.bind_address,
                              "peer_port": p.peer_port, "wallet_port": p.wallet_port}
    return {
        "n_validators": config.n_validators,
        "round_duration": config.fabric_params.round_duration,
        "block_capacity": config.fabric_params.block_capacity,
        "accounts": genesis["accounts"],
        "topology": topology.to_json(),
        "validators": validators,
        "delays": delays,
    }


@register_adapter("reffabric")
class RefFabricAdapter(SystemAdapter):
    def __init__(self, ctx: Optional[AdapterContext] = None):
        self.ctx = ctx
        self.spec_path: Optional[Path] = None
        self._procs: dict = {}
        self._nodes: dict = {}
        self._logs: dict = {}

    def init_configuration(self, config, topology, genesis) -> None:
        spec = fabric_spec(config, topology, genesis, self.ctx.plan)
        self.spec_path = self.ctx.workdir / SPEC_FILE
        self.spec_path.write_text(json.dumps(spec, sort_keys=True, indent=1))

    async def start_validator(self, validator_id: int) -> None:
        if self.spec_path is None:
            raise AdapterError("init_configuration must run before start_validator")
        if validator_id in self._procs or validator_id in self._nodes:
            return
        wd = self.ctx.workdir
        if self.ctx.launch_mode == "inproc":
            from .node import ValidatorNode

            node = ValidatorNode(validator_id, json.loads(self.spec_path.read_text()), wd, self.ctx.epoch_ms)
            await node.start()
            self._nodes[validator_id] = node
        else:
            logf = open(wd / "node.stderr", "ab")
            self._logs[validator_id] = logf
            cmd = [self.ctx.python or sys.executable, "-m", "fabricbench.reffabric.node",
                   "--id", str(validator_id), "--spec", str(self.spec_path), "--workdir", str(wd),
                   "--epoch-ms", str(self.ctx.epoch_ms)]
            try:
                self._procs[validator_id] = subprocess.Popen(cmd, stdout=logf, stderr=logf)
            except OSError as exc:
                raise AdapterError(f"cannot spawn validator {validator_id}: {exc}") from exc
        await self._wait_ready(validator_id)

    async def _wait_ready(self, validator_id: int, timeout: float = 15.0) -> None:
        me = self.ctx.plan.instances[validator_id]
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while loop.time() < deadline:
            proc = self._procs.get(validator_id)
            if proc is not None and proc.poll() is not None:
                raise AdapterError(f"validator {validator_id} exited with {proc.returncode} during startup")
            try:
                _, w = await asyncio.open_connection(me.connect_address, me.wallet_port)
                w.close()
                return
            except OSError:
                await asyncio.sleep(0.05)
        raise AdapterError(f"validator {validator_id} wallet not reachable after {timeout}s")

    async def stop_validator(self, validator_id: int, deadline: float = 10.0) -> Optional[bool]:
        node = self._nodes.pop(validator_id, None)
        if node is not None:
            await node.stop()
            return False
        proc = self._procs.pop(validator_id, None)
        if proc is None:
            return None
        forced = False
        if proc.poll() is None:
            proc.send_signal(signal.SIGTERM)
            loop = asyncio.get_running_loop()
            end = loop.time() + deadline
            while proc.poll() is None and loop.time() < end:
                await asyncio.sleep(0.05)
            if proc.poll() is None:
                proc.kill()
                proc.wait()
                forced = True
        logf = self._logs.pop(validator_id, None)
        if logf is not None:
            logf.close()
        return forced

    def child_pids(self) -> list:
        return [p.pid for p in self._procs.values() if p.poll() is None]

    def net_counters(self) -> tuple:
        """(bytes_in, bytes_out) self-reported by the validators this
        instance runs."""
        if self._nodes:
            return (sum(n.net.bytes_in for n in self._nodes.values()),
                    sum(n.net.bytes_out for n in self._nodes.values()))
        path = self.ctx.workdir / "netcounters.json"
        try:
            d = json.loads(path.read_text())
        except (OSError, ValueError):
            return None
        return d["net_in_bytes"], d["net_out_bytes"]

    # analysis ----------------------------------------------------------------

    def parse_ledger(self, artifacts) -> list:
        """Outcomes from collected validator directories.

        ``artifacts`` maps validator ID to its artifact directory. A
        transaction's confirmation time is the commit time of its block at
        the validator that accepted it from the client, falling back to the
        block timestamp.
        """
        chains = {}
        accepted_by = {}
        wallet_rows = []
        for vid, path in sorted(artifacts.items()):
            path = Path(path)
            ledger = path / "ledger.jsonl"
            if ledger.exists():
                chains[vid] = read_ledger(ledger)
            wallet = path / "wallet.csv"
            if wallet.exists():
                with open(wallet, newline="", encoding="utf-8") as fh:
                    for row in csv.DictReader(fh):
                        wallet_rows.append((vid, row))
                        if row["status"] == "Accepted":
                            accepted_by[row["tx_id"]] = vid
        if not chains and not wallet_rows:
            return []
        outcomes = []
        in_ledger = set()
        if chains:
            canon_id = max(chains, key=lambda v: (len(chains[v]), -v))
            canon = chains[canon_id]
            commit_at = {vid: [ts for _, ts in chain] for vid, chain in chains.items()}
            for block, block_commit in canon:
                for tx in block.txs:
                    in_ledger.add(tx.tx_id)
                    v = accepted_by.get(tx.tx_id)
                    local = commit_at.get(v)
                    if local is not None and block.height < len(local) \
                            and chains[v][block.height][0].hash == block.hash:
                        confirm = local[block.height]
                    else:
                        confirm = block.timestamp
                    outcomes.append(TxOutcome(tx.tx_id, tx.submit_ts, confirm, TxStatus.CONFIRMED))
        for vid, row in wallet_rows:
            tx_id = row["tx_id"]
            if tx_id in in_ledger:
                continue
            ts = int(row["accept_ts_ms"])
            if row["status"].startswith("Rejected"):
                outcomes.append(TxOutcome(tx_id, ts, None, TxStatus.REJECTED))
            else:
                outcomes.append(TxOutcome(tx_id, ts, None, TxStatus.UNCONFIRMED))
        return outcomes


    def verify(self, artifacts, genesis: dict) -> dict:
        """Conservation on every exported chain and block-for-block agreement."""
        conserved = True
        problems = []
        for vid, path in sorted(artifacts.items()):
            ledger = Path(path) / "ledger.jsonl"
            if not ledger.exists():
                continue
            try:
                summary = verify_chain([b for b, _ in read_ledger(ledger)], genesis["accounts"])
                conserved = conserved and summary["total"] == sum(summary["balances"].values())
            except InvalidBlock as exc:
                conserved = False
                problems.append(f"validator {vid}: {exc}")
        return {"conserved": conserved, "chains_agree": chains_agree(artifacts), "chain_problems": problems}


def chains_agree(artifacts) -> bool:
    """True when every exported chain lists the same blocks."""
    hashes = []
    for _, path in sorted(artifacts.items()):
        ledger = Path(path) / "ledger.jsonl"
        if ledger.exists():
            hashes.append([b.hash for b, _ in read_ledger(ledger)])
    return all(h == hashes[0] for h in hashes[1:])
