"""Deterministic core of the reference fabric: blocks, the hash chain, the
transaction pool and account state. No I/O; the node wraps this with
networking and a round clock.

Canonical block serialization (hashed with SHA-256)::

    {"height": int, "prev_hash": hex, "proposer": int, "timestamp": int,
     "txs": [tx, ...]}

encoded as JSON with sorted keys and no whitespace, each tx in its
``Transaction.to_dict`` form.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..model import Transaction

ZERO_HASH = bytes(32)

BAD_AUTH = "BadAuth"
BAD_NONCE = "BadNonce"
INSUFFICIENT_FUNDS = "InsufficientFunds"


class ForkDetected(Exception):
    def __init__(self, block: "Block", head: "Block"):
        super().__init__(f"block {block.height} from {block.proposer} does not extend head {head.height}")
        self.block = block
        self.head = head


class ChainGap(Exception):
    """A block arrived before its predecessors."""


class InvalidBlock(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    proposer: int
    txs: tuple = ()
    hash: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if not self.hash:
            object.__setattr__(self, "hash", hashlib.sha256(self.canonical()).digest())

    def canonical(self) -> bytes:
        return json.dumps(self._body(), sort_keys=True, separators=(",", ":")).encode()

    def _body(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "proposer": self.proposer,
            "timestamp": self.timestamp,
            "txs": [tx.to_dict() for tx in self.txs],
        }

    def to_record(self, commit_ts: Optional[int] = None) -> dict:
        rec = self._body()
        rec["hash"] = self.hash.hex()
        if commit_ts is not None:
            rec["commit_ts"] = commit_ts
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Block":
        block = cls(int(rec["height"]), bytes.fromhex(rec["prev_hash"]), int(rec["timestamp"]),
                    int(rec["proposer"]), tuple(Transaction.from_dict(t) for t in rec["txs"]))
        if "hash" in rec and block.hash.hex() != rec["hash"]:
            raise InvalidBlock(f"hash mismatch at height {block.height}")
        return block

    def encode(self) -> bytes:
        return json.dumps(self.to_record(), separators=(",", ":")).encode()

    @classmethod
    def decode(cls, payload: bytes) -> "Block":
        return cls.from_record(json.loads(payload))


def genesis_block() -> Block:
    return Block(0, ZERO_HASH, 0, 0, ())


class TxPool:
    """FIFO queue of verified, not yet committed transactions."""

    def __init__(self):
        self._txs: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, tx_id: str) -> bool:
        return tx_id in self._txs

    def add(self, tx: Transaction) -> bool:
        if tx.tx_id in self._txs:
            return False
        self._txs[tx.tx_id] = tx
        return True

    def remove(self, tx_id: str) -> Optional[Transaction]:
        return self._txs.pop(tx_id, None)

    def oldest(self, k: int) -> list:
        out = []
        for tx in self._txs.values():
            if len(out) >= k:
                break
            out.append(tx)
        return out

    def ids(self) -> list:
        return list(self._txs)


class FabricState:
    """One validator's view: chain, pool and balances."""

    def __init__(self, validator_id: int, n_validators: int, accounts: dict, block_capacity: int):
        self.id = validator_id
        self.n = n_validators
        self.capacity = block_capacity
        self.secrets = {name: bytes.fromhex(a["secret"]) for name, a in accounts.items()}
        self.balances = {name: int(a["balance"]) for name, a in accounts.items()}
        self.genesis_total = sum(self.balances.values())
        self.chain = [genesis_block()]
        self.commit_ts = [0]
        self.pool = TxPool()
        self.pending_spend: dict = {}
        self.used_nonces: dict = {}  # committed and pooled
        self.wallet_max_nonce: dict = {}
        self.committed: dict = {}  # tx_id -> height
        self.rejected: dict = {}  # tx_id -> reason
        self.invalid_dropped = 0

    # transactions --------------------------------------------------------

    @property
    def head(self) -> Block:
        return self.chain[-1]

    def seen(self, tx_id: str) -> bool:
        return tx_id in self.pool or tx_id in self.committed or tx_id in self.rejected

    def check(self, tx: Transaction, from_wallet: bool) -> Optional[str]:
        secret = self.secrets.get(tx.sender)
        if secret is None or tx.receiver not in self.balances or tx.amount <= 0 or not tx.verify(secret):
            return BAD_AUTH
        used = self.used_nonces.get(tx.sender, ())
        if tx.nonce in used:
            return BAD_NONCE
        if from_wallet and tx.nonce <= self.wallet_max_nonce.get(tx.sender, -1):
            return BAD_NONCE
        if self.balances[tx.sender] - self.pending_spend.get(tx.sender, 0) < tx.amount:
            return INSUFFICIENT_FUNDS
        return None

    def admit(self, tx: Transaction, from_wallet: bool = False) -> Optional[str]:
        """Verify and pool a transaction; returns the rejection reason, if any."""
        if tx.tx_id in self.committed or tx.tx_id in self.pool:
            return BAD_NONCE
        reason = self.check(tx, from_wallet)
        if reason is not None:
            if from_wallet:
                self.rejected[tx.tx_id] = reason
            else:
                self.invalid_dropped += 1
            return reason
        self.pool.add(tx)
        self.used_nonces.setdefault(tx.sender, set()).add(tx.nonce)
        self.pending_spend[tx.sender] = self.pending_spend.get(tx.sender, 0) + tx.amount
        if from_wallet:
            self.wallet_max_nonce[tx.sender] = max(tx.nonce, self.wallet_max_nonce.get(tx.sender, -1))
        return None

    # rounds & blocks -----------------------------------------------------

    def leader(self, round_index: int) -> int:
        return (round_index % self.n) + 1

    def propose(self, timestamp: int) -> Block:
        """Drain up to ``capacity`` pooled transactions, oldest first, into a
        block on the local head and commit it."""
        head = self.head
        ts = max(timestamp, head.timestamp + 1)
        block = Block(head.height + 1, head.hash, ts, self.id, tuple(self.pool.oldest(self.capacity)))
        self._commit(block, ts)
        return block

    def validate(self, block: Block) -> None:
        head = self.head
        if block.prev_hash != head.hash:
            raise ForkDetected(block, head)
        if block.timestamp <= head.timestamp:
            raise InvalidBlock("timestamp does not increase")
        if len(block.txs) > self.capacity:
            raise InvalidBlock("block over capacity")
        if not 1 <= block.proposer <= self.n:
            raise InvalidBlock(f"unknown proposer {block.proposer}")
        spent: dict = {}
        nonces: dict = {}
        for tx in block.txs:
            if tx.tx_id in self.committed:
                raise InvalidBlock(f"tx {tx.tx_id} already committed")
            if tx.tx_id not in self.pool:
                secret = self.secrets.get(tx.sender)
                if secret is None or tx.receiver not in self.balances or tx.amount <= 0 or not tx.verify(secret):
                    raise InvalidBlock(f"tx {tx.tx_id} fails authentication")
            seen = nonces.setdefault(tx.sender, set())
            if tx.nonce in seen:
                raise InvalidBlock(f"tx {tx.tx_id} repeats a nonce")
            seen.add(tx.nonce)
            spent[tx.sender] = spent.get(tx.sender, 0) + tx.amount
            spent[tx.receiver] = spent.get(tx.receiver, 0) - tx.amount
            if self.balances[tx.sender] - spent[tx.sender] < 0:
                raise InvalidBlock(f"tx {tx.tx_id} overdraws {tx.sender}")

    def apply(self, block: Block, commit_ts: int) -> bool:
        """Validate and append a block received from a proposer.

        Returns False for blocks already in the chain. Raises ChainGap when
        predecessors are missing and ForkDetected on a conflicting block.
        """
        if block.height < len(self.chain):
            if self.chain[block.height].hash != block.hash:
                raise ForkDetected(block, self.chain[block.height])
            return False
        if block.height > self.head.height + 1:
            raise ChainGap(block.height)
        self.validate(block)
        self._commit(block, max(commit_ts, block.timestamp))
        return True

    def _commit(self, block: Block, commit_ts: int) -> None:
        for tx in block.txs:
            self.balances[tx.sender] -= tx.amount
            self.balances[tx.receiver] += tx.amount
            self.committed[tx.tx_id] = block.height
            self.used_nonces.setdefault(tx.sender, set()).add(tx.nonce)
            if self.pool.remove(tx.tx_id) is not None:
                self.pending_spend[tx.sender] -= tx.amount
            self.rejected.pop(tx.tx_id, None)
        self.chain.append(block)
        self.commit_ts.append(commit_ts)

    # queries -------------------------------------------------------------

    def status(self, tx_id: str) -> tuple:
        if tx_id in self.committed:
            h = self.committed[tx_id]
            return ("CONFIRMED", h, self.chain[h].timestamp, self.commit_ts[h])
        if tx_id in self.pool:
            return ("PENDING",)
        if tx_id in self.rejected:
            return ("REJECTED", self.rejected[tx_id])
        return ("UNKNOWN",)

    def total_balance(self) -> int:
        return sum(self.balances.values())

    def ledger_lines(self) -> Iterable[str]:
        for block, ts in zip(self.chain, self.commit_ts):
            yield json.dumps(block.to_record(ts), sort_keys=True, separators=(",", ":"))


def read_ledger(path) -> list:
    """(Block, commit_ts) pairs from an exported ledger file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append((Block.from_record(rec), rec.get("commit_ts", rec["timestamp"])))
    return out


def verify_chain(blocks: list, accounts: dict) -> dict:
    """Replay an exported chain from genesis balances.

    Checks hash links, increasing timestamps and balance conservation after
    every block. Returns summary counts; raises InvalidBlock on violation.
    """
    balances = {name: int(a["balance"]) for name, a in accounts.items()}
    total = sum(balances.values())
    if not blocks or blocks[0].hash != genesis_block().hash:
        raise InvalidBlock("chain does not start at the genesis block")
    prev = blocks[0]
    n_txs = 0
    for b in blocks[1:]:
        if b.height != prev.height + 1 or b.prev_hash != prev.hash:
            raise InvalidBlock(f"broken hash link at height {b.height}")
        if b.timestamp <= prev.timestamp:
            raise InvalidBlock(f"timestamp not increasing at height {b.height}")
        for tx in b.txs:
            balances[tx.sender] -= tx.amount
            balances[tx.receiver] += tx.amount
            if balances[tx.sender] < 0:
                raise InvalidBlock(f"negative balance for {tx.sender} at height {b.height}")
        if sum(balances.values()) != total:
            raise InvalidBlock(f"balance not conserved at height {b.height}")
        n_txs += len(b.txs)
        prev = b
    return {"height": prev.height, "txs": n_txs, "total": total, "balances": balances}
