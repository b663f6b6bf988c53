"""Reference fabric validator process.

Runs a :class:`FabricState` behind three asyncio services:

* the wallet API, a line protocol on TCP::

      SUBMIT <tx-json>           -> OK <tx_id> <validator> | REJECTED <tx_id> <reason>
      STATUS <tx_id> [<tx_id>..] -> one line per id:
                                    STATUS <tx_id> PENDING | UNKNOWN
                                    STATUS <tx_id> CONFIRMED <height> <block_ts> <commit_ts>
                                    STATUS <tx_id> REJECTED <reason>
      PING                       -> PONG <now_ms>

* the validator-to-validator protocol, broker framing with the topic as the
  message kind (``TX``, ``BLOCK``, ``RESYNC``);
* the round clock: round ``r`` starts at ``epoch + r * R`` and its leader
  proposes a block (possibly empty) at the start.

Outgoing validator frames are held back by the configured one-way link delay.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import math
import os
import signal
import sys
import time
from pathlib import Path
from typing import Optional

from ..broker import FrameDecoder, encode_frame
from ..model import Transaction
from .ledger import Block, ChainGap, FabricState, ForkDetected, InvalidBlock

log = logging.getLogger("fabricbench.node")


class NetCounters:
    def __init__(self):
        self.bytes_in = 0
        self.bytes_out = 0


class PeerLink:
    """Outgoing connection to one validator with a fixed one-way delay."""

    def __init__(self, node: "ValidatorNode", peer: int, host: str, port: int, delay_ms: float):
        self.node = node
        self.peer = peer
        self.host = host
        self.port = port
        self.delay = delay_ms / 1000.0
        self.transport: Optional[asyncio.Transport] = None
        self._buf: list = []
        self._backlog: list = []
        self._flush_scheduled = False
        self._seq = 0

    def send(self, kind: str, payload: bytes) -> None:
        self._seq += 1
        self._buf.append(encode_frame(kind, self.node.id, self._seq, payload))
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        data = b"".join(self._buf)
        self._buf.clear()
        if not data:
            return
        self.node.net.bytes_out += len(data)
        if self.delay > 0:
            asyncio.get_running_loop().call_later(self.delay, self._write, data)
        else:
            self._write(data)

    def _write(self, data: bytes) -> None:
        if self.transport is None or self.transport.is_closing():
            # not connected yet: keep order, deliver on connect
            self._backlog.append(data)
            return
        self.transport.write(data)

    async def connect_forever(self) -> None:
        delay = 0.05
        loop = asyncio.get_running_loop()
        while not self.node.closing:
            try:
                transport, _ = await loop.create_connection(asyncio.Protocol, self.host, self.port)
            except OSError:
                await asyncio.sleep(delay)
                delay = min(delay * 2, 1.0)
                continue
            self.transport = transport
            if self._backlog:
                transport.write(b"".join(self._backlog))
                self._backlog.clear()
            return

    def close(self) -> None:
        if self.transport is not None:
            self.transport.close()


class PeerProtocol(asyncio.Protocol):
    def __init__(self, node: "ValidatorNode"):
        self.node = node
        self.decoder = FrameDecoder()

    def data_received(self, data: bytes) -> None:
        self.node.net.bytes_in += len(data)
        for msg in self.decoder.feed(data):
            self.node.on_peer_message(msg.topic, msg.sender, msg.payload)


class ValidatorNode:
    def __init__(self, validator_id: int, spec: dict, workdir, epoch_ms: int):
        self.id = validator_id
        self.spec = spec
        self.workdir = Path(workdir)
        self.epoch_ms = epoch_ms
        self.n = int(spec["n_validators"])
        self.round_ms = int(spec["round_duration"])
        self.state = FabricState(validator_id, self.n, spec["accounts"], int(spec["block_capacity"]))
        self.neighbors = set()
        for a, b in spec["topology"]["edges"]:
            if a == validator_id:
                self.neighbors.add(b)
            elif b == validator_id:
                self.neighbors.add(a)
        self.delays = {int(k): float(v) for k, v in spec.get("delays", {}).get(str(validator_id), {}).items()}
        self.net = NetCounters()
        self.links: dict = {}
        self.orphans: dict = {}
        self.wallet_log: list = []
        self.closing = False
        self.proposing = True
        self.stats = {"gossip_dup": 0, "gossip_non_neighbor": 0, "forks": 0, "invalid_blocks": 0,
                      "blocks_proposed": 0, "resyncs": 0}
        self._servers: list = []
        self._tasks: list = []
        self._stopped = asyncio.Event()

    def now(self) -> int:
        return int(time.time() * 1000) - self.epoch_ms

    def commit_now(self) -> int:
        # rounded up, so a commit never shares a millisecond with the
        # submission it settles and ledger latency is never understated
        return math.ceil(time.time() * 1000) - self.epoch_ms

    # lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        me = self.spec["validators"][str(self.id)]
        loop = asyncio.get_running_loop()
        peer_server = await loop.create_server(lambda: PeerProtocol(self), me["bind"], me["peer_port"])
        wallet_server = await asyncio.start_server(self._wallet_conn, me["bind"], me["wallet_port"])
        self._servers = [peer_server, wallet_server]
        for pid_str, info in self.spec["validators"].items():
            pid = int(pid_str)
            if pid == self.id:
                continue
            link = PeerLink(self, pid, info["host"], info["peer_port"], self.delays.get(pid, 0.0))
            self.links[pid] = link
            self._tasks.append(asyncio.ensure_future(link.connect_forever()))
        self._tasks.append(asyncio.ensure_future(self._round_clock()))
        self._tasks.append(asyncio.ensure_future(self._counters_loop()))
        log.info("validator %d up: wallet %s, peers %s, neighbors %s", self.id, me["wallet_port"],
                 me["peer_port"], sorted(self.neighbors))

    async def stop(self, grace_s: Optional[float] = None) -> None:
        """Stop proposing, absorb in-flight blocks, export artifacts."""
        if not self.proposing:
            await self._stopped.wait()
            return
        self.proposing = False
        if grace_s is None:
            grace_s = (self.round_ms + max(self.delays.values(), default=0.0)) / 1000.0 + 0.3
        await asyncio.sleep(grace_s)
        self.closing = True
        for t in self._tasks:
            t.cancel()
        for s in self._servers:
            s.close()
        for link in self.links.values():
            link.close()
        self.export()
        self._stopped.set()

    async def wait_stopped(self) -> None:
        await self._stopped.wait()

    # outbound ----------------------------------------------------------------

    def gossip(self, tx_payload: bytes, exclude: Optional[int] = None) -> None:
        for peer in self.neighbors:
            if peer != exclude:
                self.links[peer].send("TX", tx_payload)

    def broadcast_block(self, payload: bytes) -> None:
        for link in self.links.values():
            link.send("BLOCK", payload)

    # inbound -----------------------------------------------------------------

    def on_peer_message(self, kind: str, sender: int, payload: bytes) -> None:
        if kind == "TX":
            self._on_tx(sender, payload)
        elif kind == "BLOCK":
            self._on_block(sender, payload)
        elif kind == "RESYNC":
            self._on_resync(sender, int(payload))
        else:
            log.warning("unknown message kind %r from %d", kind, sender)

    def _on_tx(self, sender: int, payload: bytes) -> None:
        if sender not in self.neighbors:
            self.stats["gossip_non_neighbor"] += 1
            return
        tx = Transaction.from_json(payload)
        if self.state.seen(tx.tx_id):
            self.stats["gossip_dup"] += 1
            return
        if self.state.admit(tx, from_wallet=False) is None:
            self.gossip(payload, exclude=sender)

    def _on_block(self, sender: int, payload: bytes) -> None:
        if self.closing:
            return
        try:
            block = Block.decode(payload)
        except (InvalidBlock, ValueError, KeyError) as exc:
            self.stats["invalid_blocks"] += 1
            log.warning("undecodable block from %d: %s", sender, exc)
            return
        self._try_apply(block)

    def _try_apply(self, block) -> None:
        try:
            if not self.state.apply(block, self.commit_now()):
                return
        except ChainGap:
            self.orphans[block.height] = block
            self._request_resync(block.proposer)
            return
        except ForkDetected as exc:
            self.stats["forks"] += 1
            log.warning("fork detected: %s; requesting resync from %d", exc, block.proposer)
            self._request_resync(block.proposer)
            return
        except InvalidBlock as exc:
            self.stats["invalid_blocks"] += 1
            log.warning("invalid block %d from %d: %s", block.height, block.proposer, exc)
            return
        nxt = self.state.head.height + 1
        while nxt in self.orphans:
            orphan = self.orphans.pop(nxt)
            try:
                self.state.apply(orphan, self.commit_now())
            except (ChainGap, ForkDetected, InvalidBlock):
                break
            nxt += 1
        for h in [h for h in self.orphans if h <= self.state.head.height]:
            del self.orphans[h]

    def _request_resync(self, peer: int) -> None:
        if peer in self.links:
            self.stats["resyncs"] += 1
            self.links[peer].send("RESYNC", str(self.state.head.height + 1).encode())

    def _on_resync(self, sender: int, from_height: int) -> None:
        link = self.links.get(sender)
        if link is None:
            return
        for block in self.state.chain[max(from_height, 1):]:
            link.send("BLOCK", block.encode())

    # round clock -------------------------------------------------------------

    async def _round_clock(self) -> None:
        R = self.round_ms
        while True:
            r = self.now() // R + 1
            await asyncio.sleep(max(0.0, (self.epoch_ms + r * R) / 1000.0 - time.time()))
            if not self.proposing:
                continue
            if self.state.leader(r) != self.id:
                continue
            block = self.state.propose(self.commit_now())
            self.stats["blocks_proposed"] += 1
            self.broadcast_block(block.encode())

    # wallet ------------------------------------------------------------------

    async def _wallet_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                self.net.bytes_in += len(line)
                reply = self._wallet_request(line.decode().strip())
                data = (reply + "\n").encode()
                self.net.bytes_out += len(data)
                writer.write(data)
                if writer.transport.get_write_buffer_size() > 1 << 20:
                    await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            writer.close()

    def _wallet_request(self, line: str) -> str:
        verb, _, rest = line.partition(" ")
        if verb == "SUBMIT":
            return self.wallet_submit(rest)
        if verb == "STATUS":
            return "\n".join(self.wallet_status(t) for t in rest.split())
        if verb == "PING":
            return f"PONG {self.now()}"
        return f"ERROR unknown verb {verb!r}"

    def wallet_submit(self, tx_json: str) -> str:
        try:
            tx = Transaction.from_json(tx_json)
        except (ValueError, KeyError, TypeError) as exc:
            return f"ERROR malformed transaction: {exc}"
        reason = self.state.admit(tx, from_wallet=True)
        ts = self.now()
        if reason is not None:
            self.wallet_log.append((tx.tx_id, ts, f"Rejected:{reason}"))
            return f"REJECTED {tx.tx_id} {reason}"
        self.wallet_log.append((tx.tx_id, ts, "Accepted"))
        self.gossip(tx_json.encode())
        return f"OK {tx.tx_id} {self.id}"

    def wallet_status(self, tx_id: str) -> str:
        st = self.state.status(tx_id)
        return "STATUS " + tx_id + " " + " ".join(str(x) for x in st)

    # artifacts ---------------------------------------------------------------

    def counters(self) -> dict:
        return {"ts_ms": self.now(), "net_in_bytes": self.net.bytes_in, "net_out_bytes": self.net.bytes_out,
                "pool": len(self.state.pool), "height": self.state.head.height,
                "invalid_dropped": self.state.invalid_dropped, **self.stats}

    def _write_counters(self) -> None:
        path = self.workdir / "netcounters.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.counters()))
        os.replace(tmp, path)

    async def _counters_loop(self) -> None:
        while True:
            self._write_counters()
            await asyncio.sleep(0.25)

    def export(self) -> None:
        self.export_ledger(self.workdir / "ledger.jsonl")
        with open(self.workdir / "wallet.csv", "w", encoding="utf-8") as fh:
            fh.write("tx_id,accept_ts_ms,status\n")
            for tx_id, ts, status in self.wallet_log:
                fh.write(f"{tx_id},{ts},{status}\n")
        self._write_counters()

    def export_ledger(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.state.ledger_lines():
                fh.write(line + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="reference fabric validator")
    ap.add_argument("--id", type=int, required=True)
    ap.add_argument("--spec", required=True, help="fabric spec JSON written by the adapter")
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--epoch-ms", type=int, required=True)
    args = ap.parse_args(argv)

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(filename=workdir / "node.log", level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    spec = json.loads(Path(args.spec).read_text())

    async def run() -> None:
        node = ValidatorNode(args.id, spec, workdir, args.epoch_ms)
        await node.start()
        loop = asyncio.get_running_loop()
        stop_task = []
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, lambda: stop_task.append(asyncio.ensure_future(node.stop())))
        await node.wait_stopped()
        log.info("validator %d stopped at height %d", node.id, node.state.head.height)

    asyncio.run(run())
    return 0


if __name__ == "__main__":
    sys.exit(main())
