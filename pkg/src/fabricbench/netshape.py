"""Geo-distributed network conditions.

Loads a city round-trip-time matrix, places validators on cities round-robin
and turns the placement into one-way link delays (half the RTT). The delays
are applied either in-process by the reference fabric or through an emitted
``tc``/netem script for real deployments.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path


class MatrixError(ValueError):
    def __init__(self, message: str, row: int = -1, col: int = -1):
        where = f" (row {row}, column {col})" if row >= 0 else ""
        super().__init__(message + where)
        self.row = row
        self.col = col


@dataclass(frozen=True)
class LatencyMatrix:
    cities: tuple
    rtt_ms: tuple  # tuple of row tuples

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.cities)
        if n == 0:
            raise MatrixError("matrix has no cities")
        if len(self.rtt_ms) != n:
            raise MatrixError(f"expected {n} rows, found {len(self.rtt_ms)}")
        for i, row in enumerate(self.rtt_ms):
            if len(row) != n:
                raise MatrixError(f"row has {len(row)} entries, expected {n}", i, len(row))
            for j, v in enumerate(row):
                if not math.isfinite(v) or v < 0:
                    raise MatrixError(f"invalid rtt {v!r}", i, j)
                if i == j and v != 0:
                    raise MatrixError("diagonal entry must be 0", i, j)
                if v != self.rtt_ms[j][i]:
                    raise MatrixError("matrix is not symmetric", i, j)

    def rtt(self, a: int, b: int) -> float:
        return self.rtt_ms[a][b]

    @classmethod
    def from_csv(cls, text: str) -> "LatencyMatrix":
        lines = [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]
        rows = [r for r in csv.reader(lines) if r and any(c.strip() for c in r)]
        if not rows:
            raise MatrixError("empty matrix file")
        cities = tuple(c.strip() for c in rows[0][1:])
        body = []
        for i, row in enumerate(rows[1:]):
            if i >= len(cities) or row[0].strip() != cities[i]:
                raise MatrixError(f"row label {row[0]!r} does not match column order", i, 0)
            vals = []
            for j, cell in enumerate(row[1:]):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise MatrixError(f"not a number: {cell!r}", i, j) from None
            body.append(tuple(vals))
        return cls(cities, tuple(body))

    @classmethod
    def load(cls, path) -> "LatencyMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["city", *self.cities])
        for c, row in zip(self.cities, self.rtt_ms):
            w.writerow([c, *(_fmt(v) for v in row)])
        return out.getvalue()


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def assign_cities(n: int, matrix: LatencyMatrix) -> dict:
    """Validator ID -> city index, round-robin over the matrix's cities."""
    return {i: (i - 1) % len(matrix.cities) for i in range(1, n + 1)}


def link_delay(a: int, b: int, mapping: dict, matrix: LatencyMatrix) -> float:
    """One-way delay in ms between two validators."""
    ca, cb = mapping[a], mapping[b]
    if ca == cb:
        return 0.0
    return matrix.rtt(ca, cb) / 2.0


def delay_table(n: int, matrix: LatencyMatrix) -> dict:
    mapping = assign_cities(n, matrix)
    return {(a, b): link_delay(a, b, mapping, matrix)
            for a in range(1, n + 1) for b in range(1, n + 1) if a != b}


def emit_netem_script(mapping: dict, matrix: LatencyMatrix, plan, device: str = "eth0") -> str:
    """POSIX shell script installing per-destination netem delays.

    One section per host. Egress traffic toward each remote validator's
    peer endpoint goes through an htb class with a netem child adding the
    validator-pair one-way delay. A host carrying validators from several
    cities cannot be shaped per source validator; the section then uses the
    delay of its lowest-numbered validator and says so in a comment.
    """
    validators = sorted(i for i, inst in plan.instances.items() if inst.role == "validator")
    by_host: dict = {}
    for v in validators:
        by_host.setdefault(plan.instances[v].host.address, []).append(v)

    lines = [
        "#!/bin/sh",
        "# Per-host traffic-control setup for geo-distributed validator delays.",
        "# Run the section for a host on that host, as root.",
        "set -e",
        f'DEV="${{DEV:-{device}}}"',
        "",
    ]
    for host in sorted(by_host):
        local = by_host[host]
        src = local[0]
        lines.append(f'if [ "${{1:-}}" = "{host}" ]; then')
        if len({mapping[v] for v in local}) > 1:
            lines.append(f"  # WARNING: validators {local} on {host} span several cities; "
                         f"delays follow validator {src}")
        lines += [
            '  tc qdisc del dev "$DEV" root 2>/dev/null || true',
            '  tc qdisc add dev "$DEV" root handle 1: htb default 1',
            '  tc class add dev "$DEV" parent 1: classid 1:1 htb rate 100gbit',
        ]
        classid = 10
        for dst in validators:
            if dst in local:
                continue
            delay = link_delay(src, dst, mapping, matrix)
            if delay <= 0:
                continue
            inst = plan.instances[dst]
            ip = inst.host.address
            lines += [
                f"  # validator {src} ({matrix.cities[mapping[src]]}) -> validator {dst} "
                f"({matrix.cities[mapping[dst]]})",
                f'  tc class add dev "$DEV" parent 1: classid 1:{classid} htb rate 100gbit',
                f'  tc qdisc add dev "$DEV" parent 1:{classid} handle {classid}: netem delay {_fmt(delay)}ms',
                f'  tc filter add dev "$DEV" protocol ip parent 1:0 prio 1 u32 '
                f"match ip dst {ip}/32 match ip dport {inst.peer_port} 0xffff flowid 1:{classid}",
            ]
            classid += 1
        lines.append("fi")
        lines.append("")
    return "\n".join(lines)
