"""Open-loop asset-transfer workload run by each client instance.

Each client submits ``tx_rate / n_clients`` transfers per second of one unit
to a fixed counterparty, on a fixed schedule that never waits for
confirmations. Every transaction goes to exactly one validator, the one
chosen by :func:`fabricbench.model.assign_validator`.
"""

from __future__ import annotations

import asyncio
import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .model import Transaction, account_name, assign_validator, counterparty

log = logging.getLogger(__name__)

TRANSFER_AMOUNT = 1
SUBMISSION_HEADER = "tx_id,client_id,validator_id,submit_ts_ms,status"


@dataclass
class Submission:
    tx_id: str
    client_id: int
    validator_id: int
    submit_ts: int
    status: str = "Unacknowledged"


@dataclass
class SubmissionLog:
    rows: dict = field(default_factory=dict)  # tx_id -> Submission (insertion ordered)
    lateness_ms: list = field(default_factory=list)

    def add(self, sub: Submission) -> None:
        if sub.tx_id in self.rows:
            raise ValueError(f"duplicate tx_id {sub.tx_id}")
        self.rows[sub.tx_id] = sub

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        out = [SUBMISSION_HEADER]
        for s in self.rows.values():
            out.append(f"{s.tx_id},{s.client_id},{s.validator_id},{s.submit_ts},{s.status}")
        return "\n".join(out) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def tick_offsets(rate: float, duration_s: float, phase: float = 0.0, pacing: str = "uniform",
                 rng: Optional[random.Random] = None) -> list:
    """Submission times in seconds from the start of the issue window."""
    if rate <= 0:
        return []
    if pacing == "uniform":
        interval = 1.0 / rate
        n = math.floor(duration_s * rate + 1e-9)
        return [phase * interval + k * interval for k in range(n)]
    rng = rng or random.Random(0)
    out = []
    t = rng.expovariate(rate)
    while t < duration_s:
        out.append(t)
        t += rng.expovariate(rate)
    return out


class ClientLoad:
    """Drives one client's submissions against its validator's wallet."""

    def __init__(self, client_id: int, config, wallet, secret: bytes, epoch_ms: int,
                 link_delay_ms: float = 0.0,
                 on_submit: Optional[Callable[[Submission], None]] = None):
        self.client_id = client_id
        self.config = config
        self.wallet = wallet
        self.secret = secret
        self.epoch_ms = epoch_ms
        self.link_delay = link_delay_ms / 1000.0
        self.validator_id = assign_validator(client_id, config.n_validators)
        self.sender = account_name(client_id)
        self.receiver = account_name(counterparty(client_id, config.n_validators, config.n_clients))
        self.log = SubmissionLog()
        self.on_submit = on_submit
        self.nonce = 0
        self.finished = asyncio.Event()

    def now(self) -> int:
        return int(time.time() * 1000) - self.epoch_ms

    def schedule(self) -> list:
        cfg = self.config
        index = self.client_id - cfg.n_validators - 1
        phase = index / cfg.n_clients
        rng = random.Random((cfg.rng_seed << 16) ^ self.client_id)
        return tick_offsets(cfg.per_client_rate, cfg.issue_duration * cfg.time_scale, phase, cfg.pacing, rng)

    def _submit(self) -> None:
        self.nonce += 1
        ts = self.now()
        tx = Transaction.create(self.secret, self.sender, self.receiver, TRANSFER_AMOUNT, self.nonce, ts)
        sub = Submission(tx.tx_id, self.client_id, self.validator_id, ts)
        self.log.add(sub)
        if self.on_submit is not None:
            self.on_submit(sub)

        def on_reply(reply: Optional[str]) -> None:
            if reply is None:
                sub.status = "Failed:ConnectionLost"
            elif reply.startswith("OK"):
                sub.status = "Accepted"
            elif reply.startswith("REJECTED"):
                sub.status = "Rejected:" + reply.split()[-1]
            else:
                sub.status = "Failed:" + reply.replace(",", ";")[:60]

        try:
            if self.link_delay > 0:
                asyncio.get_running_loop().call_later(self.link_delay, self._send_later, tx, on_reply, sub)
            else:
                self.wallet.submit_nowait(tx, on_reply)
        except ConnectionError as exc:
            sub.status = f"Failed:{type(exc).__name__}"

    def _send_later(self, tx, on_reply, sub) -> None:
        try:
            self.wallet.submit_nowait(tx, on_reply)
        except ConnectionError as exc:
            sub.status = f"Failed:{type(exc).__name__}"

    async def run(self) -> SubmissionLog:
        """Issue the whole schedule; ticks run late rather than being skipped."""
        start = time.time()
        try:
            for offset in self.schedule():
                target = start + offset
                delay = target - time.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    self.log.lateness_ms.append(int(-delay * 1000))
                    if -delay > 0.05:
                        # yield now and then while catching up
                        await asyncio.sleep(0)
                self._submit()
        finally:
            self.finished.set()
        log.info("client %d issued %d transactions to validator %d", self.client_id, len(self.log),
                 self.validator_id)
        return self.log


async def start_load(client_id: int, config, wallet, secret: bytes, epoch_ms: int, **kw) -> SubmissionLog:
    return await ClientLoad(client_id, config, wallet, secret, epoch_ms, **kw).run()


async def drain_wait(config) -> None:
    """Idle for the drain window after issuing ends."""
    await asyncio.sleep(config.drain_duration * config.time_scale)
