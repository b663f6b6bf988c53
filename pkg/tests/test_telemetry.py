import asyncio
import os
import subprocess
import sys
import time

import pytest

from fabricbench.telemetry import Sampler, counters_monotone, dir_size, monitor_loop, read_samples

from conftest import run_async

BUSY = "import time\nt=time.time()\nwhile time.time()-t<2.0:\n    pass\n"


def _cpu_of_child(code, tmp_path):
    p = subprocess.Popen([sys.executable, "-c", code])
    s = Sampler(1, tmp_path, 0)
    first = s.sample([p.pid])
    while p.poll() is None:
        last = s.sample([p.pid])
        time.sleep(0.05)
    return last.cpu_time - first.cpu_time


def test_busy_loop_cpu_within_25_percent(tmp_path):
    assert 1.5 <= _cpu_of_child(BUSY, tmp_path) <= 2.5


def test_idle_process_uses_little_cpu(tmp_path):
    assert _cpu_of_child("import time; time.sleep(1.5)", tmp_path) < 0.3


def test_disk_grows_with_written_file(tmp_path):
    s = Sampler(1, tmp_path, 0)
    before = s.sample([os.getpid()]).disk_used
    (tmp_path / "blob").write_bytes(b"\0" * (1 << 20))
    after = s.sample([os.getpid()]).disk_used
    assert after - before >= (1 << 20)
    assert dir_size(tmp_path) == after


def test_counters_never_decrease_when_processes_exit(tmp_path):
    p = subprocess.Popen([sys.executable, "-c", "t=__import__('time').time()\nwhile __import__('time').time()-t<0.5: pass"])
    counters = iter([(10, 10), (20, 30), (5, 5), None, (40, 50)])
    s = Sampler(1, tmp_path, 0, net_source=lambda: next(counters))
    rows = []
    for _ in range(5):
        rows.append(s.sample([p.pid, os.getpid()]))
        time.sleep(0.15)
    p.wait()
    cpu = [r.cpu_time for r in rows]
    assert cpu == sorted(cpu)
    assert [r.net_in for r in rows] == [10, 20, 20, 20, 40]
    assert [r.net_out for r in rows] == [10, 30, 30, 30, 50]


def test_monitor_loop_writes_final_sample(tmp_path):
    path = tmp_path / "metrics.csv"

    async def go():
        stop = asyncio.Event()
        task = asyncio.create_task(monitor_loop(Sampler(3, tmp_path, 0), lambda: [os.getpid()], path, 50, stop))
        await asyncio.sleep(0.3)
        stop.set()
        return await task

    n = run_async(go())
    rows = read_samples(path)
    assert n == len(rows) >= 4
    assert counters_monotone(rows)
    assert all(r["mem_rss_bytes"] > 0 for r in rows)
