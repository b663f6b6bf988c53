import asyncio
import subprocess
import sys
import time

from fabricbench.model import ExperimentConfig
from fabricbench.orchestrator import LocalTransport, setup
from fabricbench.runtime import Instance

from conftest import run_async

STUBBORN = "import signal, time\nsignal.signal(signal.SIGTERM, signal.SIG_IGN)\nprint('up', flush=True)\ntime.sleep(60)\n"


def _run_dir(tmp_path):
    cfg = ExperimentConfig(n_validators=1, n_clients=1, tx_rate=1, issue_duration=1, drain_duration=1,
                           launch_mode="inproc")
    plan = setup(cfg, root=tmp_path, transport=LocalTransport())
    return plan.run_dir


def test_hung_validator_is_killed_at_deadline(tmp_path):
    run_dir = _run_dir(tmp_path)

    async def go():
        inst = Instance(1, run_dir, ("127.0.0.1", 1))
        inst.epoch_ms = int(time.time() * 1000)
        adapter = inst._adapter()
        proc = subprocess.Popen([sys.executable, "-c", STUBBORN], stdout=subprocess.PIPE)
        proc.stdout.readline()  # SIGTERM handler installed
        adapter._procs[1] = proc
        t0 = time.monotonic()
        report = await inst.graceful_stop(deadline=2.0)
        return report, time.monotonic() - t0, proc

    report, elapsed, proc = run_async(go())
    assert report.forced is True
    assert proc.poll() is not None
    assert 1.9 <= elapsed < 5


def test_stop_before_start_is_a_noop(tmp_path):
    run_dir = _run_dir(tmp_path)

    async def go():
        inst = Instance(2, run_dir, ("127.0.0.1", 1))
        first = await inst.graceful_stop()
        again = await inst.graceful_stop()
        return first, again

    first, again = run_async(go())
    assert first is again
    assert first.started is False and first.forced is False


def test_no_epoch_exits_cleanly(tmp_path, monkeypatch):
    from fabricbench import runtime
    from fabricbench.broker import BrokerHub

    monkeypatch.setattr(runtime, "EPOCH_TIMEOUT_S", 0.3)
    run_dir = _run_dir(tmp_path)

    async def go():
        hub = await BrokerHub("127.0.0.1", 0).start()
        try:
            return await Instance(2, run_dir, ("127.0.0.1", hub.port)).run()
        finally:
            await hub.stop()

    report = run_async(go())
    assert report.started is False
