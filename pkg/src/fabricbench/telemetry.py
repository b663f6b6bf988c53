"""Per-instance resource sampling.

CPU and memory come from the process table (psutil reads procfs on Linux);
disk usage is the size of the instance working directory; network bytes are
self-reported by the fabric, since per-process socket accounting is not
portable.
"""

from __future__ import annotations

import asyncio
import logging
import os
import time
from pathlib import Path
from typing import Callable, Iterable, Optional

from .model import MetricsSample

log = logging.getLogger(__name__)


class SampleUnavailable(RuntimeError):
    pass


def dir_size(path) -> int:
    total = 0
    for root, _, files in os.walk(path):
        for f in files:
            try:
                total += os.lstat(os.path.join(root, f)).st_size
            except OSError:
                pass
    return total


class Sampler:
    """Cumulative sampler over a changing set of processes.

    Processes that exit keep contributing their last observed CPU time, so
    the cumulative counters never go backwards.
    """

    def __init__(self, instance: int, workdir, epoch_ms: int,
                 net_source: Optional[Callable[[], Optional[tuple]]] = None):
        try:
            import psutil
        except ImportError as exc:  # pragma: no cover - psutil is a dependency
            raise SampleUnavailable("psutil not installed") from exc
        self._psutil = psutil
        self.instance = instance
        self.workdir = Path(workdir)
        self.epoch_ms = epoch_ms
        self.net_source = net_source
        self._cpu_last: dict = {}  # pid -> last cpu seconds
        self._procs: dict = {}
        self._last = None

    def _proc(self, pid: int):
        p = self._procs.get(pid)
        if p is None:
            p = self._psutil.Process(pid)
            self._procs[pid] = p
        return p

    def sample(self, pids: Iterable[int]) -> MetricsSample:
        ps = self._psutil
        rss = 0
        for pid in set(pids):
            try:
                p = self._proc(pid)
                with p.oneshot():
                    t = p.cpu_times()
                    cpu = t.user + t.system
                    rss += p.memory_info().rss
                self._cpu_last[pid] = max(cpu, self._cpu_last.get(pid, 0.0))
            except (ps.NoSuchProcess, ps.ZombieProcess):
                self._procs.pop(pid, None)
            except ps.AccessDenied as exc:
                raise SampleUnavailable(f"cannot read process {pid}: {exc}") from exc
        cpu_total = sum(self._cpu_last.values())
        net_in = net_out = 0
        if self.net_source is not None:
            counters = self.net_source()
            if counters is not None:
                net_in, net_out = counters
        if self._last is not None:
            # counters from a restarted source must not go backwards
            net_in = max(net_in, self._last.net_in)
            net_out = max(net_out, self._last.net_out)
            cpu_total = max(cpu_total, self._last.cpu_time)
        s = MetricsSample(self.instance, int(time.time() * 1000) - self.epoch_ms, cpu_total, rss,
                          dir_size(self.workdir), net_in, net_out)
        self._last = s
        return s


def sample(pids: Iterable[int], workdir, instance: int = 0, epoch_ms: int = 0,
           net_source=None) -> MetricsSample:
    return Sampler(instance, workdir, epoch_ms, net_source).sample(pids)


async def monitor_loop(sampler: Sampler, pids: Callable[[], Iterable[int]], path,
                       interval_ms: int = 1000, stop: Optional[asyncio.Event] = None) -> int:
    """Append one sample per interval to ``path`` until ``stop`` is set.

    Returns the number of samples written. A final sample is taken on stop.
    """
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MetricsSample.CSV_HEADER + "\n")
        while True:
            try:
                fh.write(sampler.sample(pids()).csv_row() + "\n")
                fh.flush()
                written += 1
            except SampleUnavailable as exc:
                log.warning("sample skipped: %s", exc)
            if stop is None:
                await asyncio.sleep(interval_ms / 1000.0)
                continue
            if stop.is_set():
                break
            try:
                await asyncio.wait_for(stop.wait(), interval_ms / 1000.0)
            except asyncio.TimeoutError:
                pass
    return written


def read_samples(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            if len(vals) != len(header):
                continue
            rows.append(dict(zip(header, (float(v) for v in vals))))
    return rows


def counters_monotone(rows: list) -> bool:
    for key in ("cpu_time_s", "net_in_bytes", "net_out_bytes"):
        vals = [r[key] for r in rows]
        if any(b < a for a, b in zip(vals, vals[1:])):
            return False
    return True


def utilization(rows: list) -> float:
    """Average CPU utilisation (cores) over a samples log."""
    if len(rows) < 2:
        return 0.0
    dt = (rows[-1]["ts_ms"] - rows[0]["ts_ms"]) / 1000.0
    if dt <= 0:
        return 0.0
    return (rows[-1]["cpu_time_s"] - rows[0]["cpu_time_s"]) / dt
