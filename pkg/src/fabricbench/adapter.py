"""System-under-test abstraction and validator topology generation."""

from __future__ import annotations

import abc
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional


class AdapterError(RuntimeError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    n: int
    edges: frozenset  # of (a, b) with a < b

    def __post_init__(self):
        for a, b in self.edges:
            if a == b:
                raise TopologyError(f"self-loop on {a}")
            if not (1 <= a < b <= self.n):
                raise TopologyError(f"bad edge {(a, b)}")

    def neighbors(self, v: int) -> set:
        return {b if a == v else a for a, b in self.edges if v in (a, b)}

    def adjacency(self) -> dict:
        adj = {v: set() for v in range(1, self.n + 1)}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def degree(self, v: int) -> int:
        return sum(1 for e in self.edges if v in e)

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        adj = self.adjacency()
        seen = {1}
        todo = deque([1])
        while todo:
            for w in adj[todo.popleft()]:
                if w not in seen:
                    seen.add(w)
                    todo.append(w)
        return len(seen) == self.n

    def to_json(self) -> dict:
        return {"n": self.n, "edges": sorted(list(e) for e in self.edges)}

    @classmethod
    def from_json(cls, d: dict) -> "Topology":
        return cls(d["n"], frozenset(tuple(e) for e in d["edges"]))


def random_topology(n: int, k: int, seed: int, max_attempts: int = 100) -> Topology:
    """Every validator opens ``min(k, n-1)`` connections to distinct random
    peers; the undirected union is kept if it is connected.
    """
    if n < 1 or k < 0:
        raise TopologyError("need n >= 1 and k >= 0")
    k = min(k, n - 1)
    rng = random.Random(seed)
    for _ in range(max_attempts):
        edges = set()
        for v in range(1, n + 1):
            others = [w for w in range(1, n + 1) if w != v]
            for w in rng.sample(others, k):
                edges.add((min(v, w), max(v, w)))
        topo = Topology(n, frozenset(edges))
        if topo.is_connected():
            return topo
        if k == 0:
            break
    raise TopologyError(f"no connected topology for n={n}, k={k}")


class SystemAdapter(abc.ABC):
    """What a transaction fabric must provide to be benchmarked.

    ``init_configuration`` runs once before any validator starts;
    ``parse_ledger`` runs after every validator has stopped.
    """

    name = "abstract"

    @abc.abstractmethod
    def init_configuration(self, config, topology: Topology, genesis: dict) -> None:
        ...

    @abc.abstractmethod
    async def start_validator(self, validator_id: int) -> None:
        ...

    @abc.abstractmethod
    async def stop_validator(self, validator_id: int) -> Optional[bool]:
        """Stop the validator; return True when it had to be force-killed."""

    @abc.abstractmethod
    def parse_ledger(self, artifacts) -> list:
        """TxOutcomes for every transaction visible in the collected ledgers."""

    def verify(self, artifacts, genesis: dict) -> dict:
        """Adapter-specific integrity checks over collected artifacts."""
        return {}

    def child_pids(self) -> list:
        return []

    def net_counters(self) -> Optional[tuple]:
        return None


_REGISTRY: dict = {}


def register_adapter(name: str) -> Callable:
    def deco(cls):
        cls.name = name
        _REGISTRY[name] = cls
        return cls
    return deco


def get_adapter(name: str) -> type:
    if name not in _REGISTRY:
        # the built-in fabric registers itself on import
        from . import reffabric  # noqa: F401
    try:
        return _REGISTRY[name]
    except KeyError:
        raise AdapterError(f"no adapter registered as {name!r}") from None


def adapter_names() -> list:
    from . import reffabric  # noqa: F401

    return sorted(_REGISTRY)
