import json
import subprocess
import warnings
from pathlib import Path

import pytest

from fabricbench.analysis import read_polls
from fabricbench.model import ExperimentConfig, Host
from fabricbench.orchestrator import (Deployment, HostUnreachable, LocalTransport, PartialCollection, SshTransport,
                                      SyncFailed, collect, generate_genesis, place, plan_deployment, results_root,
                                      run_experiment, setup)
from fabricbench.telemetry import counters_monotone, read_samples

from conftest import run_async


def hosts(*names):
    return tuple(Host.parse(n) for n in names)


def test_round_robin_placement():
    cfg = ExperimentConfig(hosts=hosts("a", "b"), n_validators=2, n_clients=2)
    p = place(cfg)
    assert [i for i, h in p.items() if h.address == "a"] == [1, 3]
    assert [i for i, h in p.items() if h.address == "b"] == [2, 4]


def test_plan_ports_and_workdirs(tmp_path):
    cfg = ExperimentConfig(hosts=hosts("10.0.0.1:/srv/fb"), n_validators=2, n_clients=1)
    plan = plan_deployment(cfg, tmp_path / "r1")
    v1, c3 = plan.instances[1], plan.instances[3]
    assert v1.workdir == "/srv/fb/r1/1" and (v1.wallet_port, v1.peer_port) == (7102, 7103)
    assert c3.role == "client" and c3.wallet_port == 0
    local = plan_deployment(ExperimentConfig(n_validators=3), tmp_path / "r2")
    ports = [p for i in local.validators for p in (local.instances[i].wallet_port, local.instances[i].peer_port)]
    assert len(set(ports)) == 6


def test_genesis_funds_every_client_deterministically():
    cfg = ExperimentConfig(n_validators=2, n_clients=3, tx_rate=30, issue_duration=10, rng_seed=4)
    g = generate_genesis(cfg)
    assert sorted(g["accounts"]) == ["acct3", "acct4", "acct5"]
    assert all(a["balance"] == 200 for a in g["accounts"].values())  # 100 needed + 100 margin
    assert g == generate_genesis(cfg)
    assert g != generate_genesis(ExperimentConfig(n_validators=2, n_clients=3, tx_rate=30, rng_seed=5))


def test_results_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GROMIT_RESULTS_DIR", str(tmp_path))
    assert results_root() == tmp_path


class FakeRun:
    def __init__(self, code=0):
        self.calls = []
        self.code = code

    def __call__(self, cmd, **kw):
        self.calls.append(cmd)
        return subprocess.CompletedProcess(cmd, self.code, b"", b"no route to host")


def test_ssh_transport_commands():
    run = FakeRun()
    t = SshTransport(runner=run)
    h = Host("10.0.0.9", "/w")
    t.check(h)
    t.sync(h, Path("/tmp/run"), "/w/run")
    assert run.calls[0][-2:] == ["10.0.0.9", "true"]
    assert run.calls[1][:3] == ["rsync", "-az", "--delete"] and run.calls[1][-2:] == ["/tmp/run/", "10.0.0.9:/w/run/"]


def test_ssh_failures_are_typed():
    t = SshTransport(runner=FakeRun(255))
    with pytest.raises(HostUnreachable, match="no route"):
        t.check(Host("10.0.0.9"))
    with pytest.raises(SyncFailed):
        t.sync(Host("10.0.0.9"), Path("/tmp/x"), "/w/x")


def test_setup_checks_hosts_before_writing(tmp_path):
    cfg = ExperimentConfig(hosts=hosts("10.0.0.9"))
    with pytest.raises(HostUnreachable):
        setup(cfg, root=tmp_path, transport=SshTransport(runner=FakeRun(255)))
    assert not (tmp_path / "runs").exists()


def test_teardown_is_idempotent(tmp_path):
    cfg = ExperimentConfig(n_validators=1, n_clients=1)
    plan = setup(cfg, root=tmp_path, transport=LocalTransport())
    dep = Deployment(cfg, plan, LocalTransport())

    async def go():
        await dep.teardown()
        await dep.teardown()

    run_async(go())
    assert dep.stopped


def test_collect_reports_missing_artifacts(tmp_path):
    cfg = ExperimentConfig(n_validators=1, n_clients=1)
    plan = setup(cfg, root=tmp_path, transport=LocalTransport())
    (Path(plan.instances[1].workdir) / "ledger.jsonl").write_text("")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        bundle = collect(plan)
    assert any(issubclass(x.category, PartialCollection) for x in w)
    assert "ledger.jsonl" not in bundle.missing[1] and "submissions.csv" in bundle.missing[2]


def test_small_inproc_run_end_to_end(tmp_path):
    cfg = ExperimentConfig(n_validators=2, n_clients=2, tx_rate=20, issue_duration=2, drain_duration=1.5,
                           launch_mode="inproc", poll_interval_ms=100, telemetry_interval_ms=250,
                           heartbeat_interval_ms=250)
    res = run_experiment(cfg, root=tmp_path, transport=LocalTransport())
    r = res.run
    assert r.submitted == 40 and r.confirmed == 40 and not r.saturated
    assert r.integrity["conserved"] and r.integrity["chains_agree"]
    assert not res.bundle.missing and not res.forced
    assert 0 < r.latency.mean_ms < 1000
    for i in (1, 2, 3, 4):
        wd = res.run_dir / str(i)
        rows = read_samples(wd / "metrics.csv")
        assert len(rows) >= 3 and counters_monotone(rows)
        assert (wd / "heartbeat.csv").read_text().count("\n") >= 3
    polls = read_polls(res.run_dir / "3" / "polls.csv")
    assert len(polls) == 20 and all(p.confirm_ts is not None for p in polls)
    assert (res.run_dir / "report" / "aggregate.csv").exists()
