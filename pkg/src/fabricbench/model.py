"""Shared domain types: instance roles, experiment configuration, transactions
and the outcome/metrics records every other module exchanges.

Timestamps are integer milliseconds since the experiment epoch. Instance IDs
are 1-based; validators are numbered before clients.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

LOCAL_ADDRESSES = {"localhost", "127.0.0.1", "::1"}


class ConfigError(ValueError):
    pass


class Role(str, enum.Enum):
    VALIDATOR = "validator"
    CLIENT = "client"


class TxStatus(str, enum.Enum):
    CONFIRMED = "Confirmed"
    UNCONFIRMED = "Unconfirmed"
    REJECTED = "Rejected"


def assign_validator(client: int, n_validators: int) -> int:
    """Validator ID in [1, n] congruent to ``client`` modulo ``n``."""
    if n_validators < 1 or client < 1:
        raise ValueError("client and n_validators must be >= 1")
    residue = client % n_validators
    return residue if residue else n_validators


def counterparty(client: int, n_validators: int, n_clients: int) -> int:
    """Fixed transfer target of a client: the next client ID, cyclically."""
    return ((client - n_validators) % n_clients) + n_validators + 1


def account_name(client: int) -> str:
    return f"acct{client}"


def role_of(instance: int, n_validators: int) -> Role:
    return Role.VALIDATOR if instance <= n_validators else Role.CLIENT


def now_ms(epoch_ms: int) -> int:
    return int(time.time() * 1000) - epoch_ms


@dataclass(frozen=True)
class Host:
    address: str
    workdir: str = ""

    @property
    def is_local(self) -> bool:
        return self.address in LOCAL_ADDRESSES

    @classmethod
    def parse(cls, text: str) -> "Host":
        text = text.strip()
        if ":" in text and not text.startswith("["):
            addr, _, workdir = text.partition(":")
            return cls(addr, workdir)
        return cls(text)

    def __str__(self) -> str:
        return f"{self.address}:{self.workdir}" if self.workdir else self.address


@dataclass(frozen=True)
class FabricParams:
    round_duration: int = 500  # ms
    block_capacity: int = 200
    # {(validator_a, validator_b): one-way delay ms}; filled in from the
    # latency matrix when a deployment is configured
    link_delay_matrix: Optional[dict] = None

    def __post_init__(self):
        if self.round_duration <= 0:
            raise ConfigError("round_duration must be > 0")
        if self.block_capacity < 1:
            raise ConfigError("block_capacity must be >= 1")

    @property
    def capacity_tps(self) -> float:
        return self.block_capacity * 1000.0 / self.round_duration


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    hosts: tuple = (Host("localhost"),)
    n_validators: int = 4
    n_clients: int = 4
    tx_rate: float = 0.0
    issue_duration: float = 120.0
    drain_duration: float = 60.0
    topology_degree: int = 10
    rng_seed: int = 0
    fabric_params: FabricParams = field(default_factory=FabricParams)
    latency_matrix_path: Optional[str] = None
    repetitions: int = 1
    # harness knobs beyond the core experiment description
    adapter: str = "reffabric"
    launch_mode: str = "process"
    time_scale: float = 1.0
    poll_interval_ms: int = 0
    pacing: str = "uniform"
    delay_client_links: bool = False
    telemetry_interval_ms: int = 1000
    heartbeat_interval_ms: int = 1000
    broker_host: str = "127.0.0.1"
    python: str = ""

    def __post_init__(self):
        if self.n_validators < 1:
            raise ConfigError("n_validators must be >= 1")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.tx_rate < 0:
            raise ConfigError("tx_rate must be >= 0")
        if self.issue_duration <= 0:
            raise ConfigError("issue_duration must be > 0")
        if self.drain_duration < 0:
            raise ConfigError("drain_duration must be >= 0")
        if self.n_validators > 1 and not self.topology_degree < self.n_validators:
            # the documented cap: a degree of n or more means "everyone"
            object.__setattr__(self, "topology_degree", self.n_validators - 1)
        if self.topology_degree < 0:
            raise ConfigError("topology_degree must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.launch_mode not in ("process", "inproc"):
            raise ConfigError(f"unknown launch_mode {self.launch_mode!r}")
        if self.pacing not in ("uniform", "poisson"):
            raise ConfigError(f"unknown pacing {self.pacing!r}")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be > 0")
        if not self.hosts:
            raise ConfigError("at least one host is required")

    @property
    def n_instances(self) -> int:
        return self.n_validators + self.n_clients

    @property
    def client_ids(self) -> range:
        return range(self.n_validators + 1, self.n_instances + 1)

    @property
    def validator_ids(self) -> range:
        return range(1, self.n_validators + 1)

    @property
    def per_client_rate(self) -> float:
        return self.tx_rate / self.n_clients

    @property
    def is_local(self) -> bool:
        return all(h.is_local for h in self.hosts)

    def with_rate(self, rate: float) -> "ExperimentConfig":
        return replace(self, tx_rate=rate)

    # key = value file format ---------------------------------------------

    _FABRIC_KEYS = {"round_duration_ms": "round_duration", "block_capacity": "block_capacity"}

    def to_text(self) -> str:
        lines = ["# experiment configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "fabric_params":
                lines.append(f"round_duration_ms = {value.round_duration}")
                lines.append(f"block_capacity = {value.block_capacity}")
                continue
            if f.name == "hosts":
                value = ", ".join(str(h) for h in value)
            elif value is None:
                continue
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        raw.update({k: str(v) for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        kwargs = {}
        fabric = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in raw.items():
            if key in cls._FABRIC_KEYS:
                fabric[cls._FABRIC_KEYS[key]] = int(value)
                continue
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            if key == "hosts":
                kwargs[key] = tuple(Host.parse(h) for h in value.split(",") if h.strip())
                continue
            default = next(f for f in fields(cls) if f.name == key).default
            try:
                if isinstance(default, bool):
                    kwargs[key] = _parse_bool(value)
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                elif key == "latency_matrix_path":
                    kwargs[key] = value or None
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if fabric:
            kwargs["fabric_params"] = FabricParams(**fabric)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


# transactions ------------------------------------------------------------


def auth_message(sender: str, receiver: str, amount: int, nonce: int) -> bytes:
    return f"{sender}|{receiver}|{amount}|{nonce}".encode()


def make_tx_id(sender: str, nonce: int) -> str:
    return hashlib.blake2b(f"{sender}|{nonce}".encode(), digest_size=8).hexdigest()


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    sender: str
    receiver: str
    amount: int
    nonce: int
    auth_tag: bytes
    submit_ts: int

    @classmethod
    def create(cls, secret: bytes, sender: str, receiver: str, amount: int, nonce: int,
               submit_ts: int) -> "Transaction":
        if amount <= 0:
            raise ValueError("amount must be positive")
        tag = hmac.new(secret, auth_message(sender, receiver, amount, nonce), hashlib.sha256).digest()
        return cls(make_tx_id(sender, nonce), sender, receiver, amount, nonce, tag, submit_ts)

    def verify(self, secret: bytes) -> bool:
        expected = hmac.new(secret, auth_message(self.sender, self.receiver, self.amount, self.nonce),
                            hashlib.sha256).digest()
        return hmac.compare_digest(expected, self.auth_tag) and self.tx_id == make_tx_id(self.sender, self.nonce)

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "sender": self.sender,
            "receiver": self.receiver,
            "amount": self.amount,
            "nonce": self.nonce,
            "auth_tag": self.auth_tag.hex(),
            "submit_ts": self.submit_ts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(d["tx_id"], d["sender"], d["receiver"], int(d["amount"]), int(d["nonce"]),
                   bytes.fromhex(d["auth_tag"]), int(d["submit_ts"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text) -> "Transaction":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TxOutcome:
    tx_id: str
    submit_ts: int
    confirm_ts: Optional[int]
    status: TxStatus

    def __post_init__(self):
        if (self.status is TxStatus.CONFIRMED) != (self.confirm_ts is not None):
            raise ValueError("confirm_ts must be present exactly when status is Confirmed")

    @property
    def latency(self) -> Optional[int]:
        if self.confirm_ts is None:
            return None
        return self.confirm_ts - self.submit_ts


@dataclass(frozen=True)
class MetricsSample:
    instance: int
    ts: int
    cpu_time: float
    mem_rss: int
    disk_used: int
    net_in: int
    net_out: int

    CSV_HEADER = "ts_ms,cpu_time_s,mem_rss_bytes,disk_bytes,net_in_bytes,net_out_bytes"

    def csv_row(self) -> str:
        return f"{self.ts},{self.cpu_time:.4f},{self.mem_rss},{self.disk_used},{self.net_in},{self.net_out}"


# deployment ----------------------------------------------------------------


@dataclass(frozen=True)
class PlacedInstance:
    id: int
    role: str
    host: Host
    workdir: str
    wallet_port: int = 0
    peer_port: int = 0

    @property
    def connect_address(self) -> str:
        return "127.0.0.1" if self.host.is_local else self.host.address

    @property
    def bind_address(self) -> str:
        return "127.0.0.1" if self.host.is_local else "0.0.0.0"

    def to_json(self) -> dict:
        return {"id": self.id, "role": self.role, "host": str(self.host), "workdir": self.workdir,
                "wallet_port": self.wallet_port, "peer_port": self.peer_port}

    @classmethod
    def from_json(cls, d: dict) -> "PlacedInstance":
        return cls(int(d["id"]), d["role"], Host.parse(d["host"]), d["workdir"],
                   int(d.get("wallet_port", 0)), int(d.get("peer_port", 0)))


@dataclass(frozen=True)
class DeploymentPlan:
    """Where every instance runs and which endpoints it exposes."""

    run_dir: str
    instances: dict  # id -> PlacedInstance
    broker: tuple = ("127.0.0.1", 0)

    @property
    def validators(self) -> list:
        return [i for i in sorted(self.instances) if self.instances[i].role == Role.VALIDATOR.value]

    @property
    def clients(self) -> list:
        return [i for i in sorted(self.instances) if self.instances[i].role == Role.CLIENT.value]

    def hosts(self) -> list:
        seen = []
        for i in sorted(self.instances):
            h = self.instances[i].host
            if h not in seen:
                seen.append(h)
        return seen

    def with_broker(self, host: str, port: int) -> "DeploymentPlan":
        return replace(self, broker=(host, port))

    def to_json(self) -> dict:
        return {"run_dir": self.run_dir, "broker": list(self.broker),
                "instances": [self.instances[i].to_json() for i in sorted(self.instances)]}

    @classmethod
    def from_json(cls, d: dict) -> "DeploymentPlan":
        insts = {int(x["id"]): PlacedInstance.from_json(x) for x in d["instances"]}
        return cls(d["run_dir"], insts, tuple(d.get("broker", ("127.0.0.1", 0))))

    def describe(self) -> str:
        lines = [f"run directory: {self.run_dir}"]
        for i in sorted(self.instances):
            p = self.instances[i]
            ports = f" wallet={p.wallet_port} peer={p.peer_port}" if p.role == Role.VALIDATOR.value else ""
            lines.append(f"  {i:>4} {p.role:<9} {p.host}{ports}")
        return "\n".join(lines)
