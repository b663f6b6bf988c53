import asyncio
import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from fabricbench.analysis import (ConfirmationPoller, DuplicateConfirmation, LatencyStats, RunResult, SubmissionRow,
                                  heartbeat_gaps, is_monotone, join_outcomes, mean_ci, nearest_rank, poll_confirmations,
                                  read_polls, report, saturation_search, sustained_ratio)
from fabricbench.model import ExperimentConfig, TxOutcome, TxStatus
from fabricbench.reffabric.ledger import FabricState
from fabricbench.model import Transaction

from conftest import run_async

C, U, R = TxStatus.CONFIRMED, TxStatus.UNCONFIRMED, TxStatus.REJECTED


def test_ci_of_two_runs():
    agg = mean_ci([10, 12])
    assert agg.mean == 11
    assert agg.half_width == pytest.approx(12.7062, abs=1e-4)
    assert agg.ci == pytest.approx((11 - 12.7062, 11 + 12.7062), abs=1e-4)
    assert mean_ci([5]).ci is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
def test_ci_matches_scipy_interval(xs):
    agg = mean_ci(xs)
    lo, hi = sps.t.interval(0.95, len(xs) - 1, loc=agg.mean, scale=sps.sem(xs))
    if math.isnan(lo):  # zero variance
        assert agg.half_width == pytest.approx(0, abs=1e-6)
    else:
        assert agg.ci == pytest.approx((lo, hi), rel=1e-6, abs=1e-6)


def test_nearest_rank():
    xs = list(range(1, 101))
    assert nearest_rank(xs, 50) == 50 and nearest_rank(xs, 95) == 95 and nearest_rank(xs, 100) == 100
    assert nearest_rank([7], 1) == 7
    with pytest.raises(ValueError):
        nearest_rank([], 50)


def test_latency_stats_and_histogram():
    s = LatencyStats.of([120, 80, 260, 100], bin_ms=50)
    assert (s.count, s.mean_ms, s.median_ms, s.min_ms, s.max_ms) == (4, 140, 100, 80, 260)
    assert s.histogram == (0, 1, 2, 0, 0, 1)
    assert LatencyStats.of([]).count == 0


def sub(i, ts, status="Accepted"):
    return SubmissionRow(f"t{i}", 5, 1, ts, status)


def test_join_latency_from_client_submit_time():
    outs, foreign = join_outcomes([sub(1, 100), sub(2, 200), sub(3, 300, "Rejected:BadNonce")],
                                  [TxOutcome("t1", 90, 600, C), TxOutcome("zz", 0, 700, C)])
    by = {o.tx_id: o for o in outs}
    assert by["t1"].latency == 500
    assert by["t2"].status is U and by["t3"].status is R
    assert foreign == ["zz"]


def test_confirmation_never_precedes_submission():
    (o,), _ = join_outcomes([sub(1, 500)], [TxOutcome("t1", 0, 499, C)])
    assert o.latency == 0


def test_duplicate_confirmation_raises():
    with pytest.raises(DuplicateConfirmation):
        join_outcomes([sub(1, 1)], [TxOutcome("t1", 0, 5, C), TxOutcome("t1", 0, 6, C)])


def test_saturation_rules():
    ok = [TxOutcome(f"t{i}", i * 10, i * 10 + 300, C) for i in range(100)]
    r = RunResult.from_outcomes(ok, 100, 500)
    assert not r.saturated and r.confirmed == 100 and r.latency.mean_ms == 300
    assert RunResult.from_outcomes(ok + [TxOutcome("x", 5, None, U)], 100, 500).saturated
    # everything eventually confirmed, but only after a backlog built up
    slow = [TxOutcome(f"t{i}", i * 10, 2000 + i * 20, C) for i in range(100)]
    r = RunResult.from_outcomes(slow, 100, 500)
    assert r.unconfirmed == 0 and r.sustained < 0.9 and r.saturated


def test_sustained_ratio_empty():
    assert sustained_ratio([]) == (1.0, 0)


def test_heartbeat_gaps():
    assert heartbeat_gaps([0, 1000, 2000, 6000, 7000], 1000) == [(2000, 6000)]


# saturation search with a stub runner ---------------------------------------------


def stub(capacity, calls=None, fail_at=None):
    def run(cfg):
        if calls is not None:
            calls.append(cfg.tx_rate)
        if fail_at is not None and cfg.tx_rate >= fail_at:
            raise RuntimeError("instance crashed")
        sat = cfg.tx_rate > capacity
        return RunResult(cfg.tx_rate, 10, 1 if sat else 0, 0, sat, LatencyStats.of([1]))
    return run


def test_search_finds_peak():
    calls = []
    res = saturation_search(ExperimentConfig(), 100, None, stub(450, calls))
    assert res.peak == 400 and calls == [100, 200, 300, 400, 500] and not res.bound_hit
    assert is_monotone(res.steps)


def test_search_saturated_at_first_step():
    res = saturation_search(ExperimentConfig(), 100, None, stub(50))
    assert res.peak == 0 and res.runs == 1


def test_search_bound_hit():
    res = saturation_search(ExperimentConfig(), 100, 300, stub(10_000))
    assert res.peak == 300 and res.bound_hit


def test_failed_run_counts_as_saturated():
    res = saturation_search(ExperimentConfig(), 100, None, stub(10_000, fail_at=300))
    assert res.peak == 200 and res.steps[-1][1][0].failed


def test_any_saturated_repetition_saturates_the_step():
    flip = iter([False, False, True])

    def run(cfg):
        sat = cfg.tx_rate >= 200 and next(flip)
        return RunResult(cfg.tx_rate, 1, int(sat), 0, sat, LatencyStats.of([1]))

    res = saturation_search(ExperimentConfig(), 100, None, run, repetitions=3)
    assert res.peak == 100 and res.runs == 6


@settings(max_examples=50)
@given(st.integers(0, 3000), st.integers(1, 5))
def test_search_peak_is_highest_unsaturated_step(capacity, step_k):
    step = 50 * step_k
    res = saturation_search(ExperimentConfig(), step, 4000, stub(capacity))
    assert res.peak == min(step * (capacity // step), 4000 // step * step)


# report -------------------------------------------------------------------------


def _results():
    def run(k):
        outs = [TxOutcome(f"t{k}{i}", i * 10, i * 10 + 100 + k, C) for i in range(20)]
        return RunResult.from_outcomes(outs, 200, 500, n_validators=4, issue_s=1.0)
    return {"base": [run(1), run(2)], "geo": [run(3)]}


def test_report_files_deterministic(tmp_path):
    a = report(_results(), tmp_path / "a")
    b = report(_results(), tmp_path / "b")
    assert set(a) == set(b)
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name
    assert {"aggregate.csv", "latency_distribution.csv", "series.csv", "resources.csv",
            "latency.svg", "throughput.svg", "latency_distribution.svg", "run_base_1.csv"} <= set(a)
    lines = (tmp_path / "a" / "aggregate.csv").read_text().splitlines()
    assert lines[1].startswith("base,200,2,,101.5,")


# polling ------------------------------------------------------------------------


class ClockWallet:
    """Reports each tx confirmed once its scheduled confirm time has passed."""

    def __init__(self, confirm_at, epoch):
        self.confirm_at = confirm_at
        self.epoch = epoch

    async def status(self, ids):
        now = int(time.time() * 1000) - self.epoch
        return {t: ["CONFIRMED"] if now >= self.confirm_at[t] else ["PENDING"] for t in ids}


def test_polling_within_one_interval(tmp_path):
    epoch = int(time.time() * 1000)
    confirm_at = {f"t{i}": 100 + 37 * i for i in range(10)}
    outs = run_async(poll_confirmations({t: 0 for t in confirm_at}, ClockWallet(confirm_at, epoch), 50, 5, epoch))
    for o in outs:
        assert o.status is C
        assert 0 <= o.confirm_ts - confirm_at[o.tx_id] <= 50 + 30  # one interval plus scheduling slack


def test_polling_deadline_leaves_unconfirmed(tmp_path):
    epoch = int(time.time() * 1000)
    outs = run_async(poll_confirmations({"a": 0}, ClockWallet({"a": 10**9}, epoch), 20, 0.1, epoch))
    assert [o.status for o in outs] == [U]
    p = ConfirmationPoller(None, 0)
    p.track("a", 3)
    p.write(tmp_path / "polls.csv")
    assert read_polls(tmp_path / "polls.csv") == [TxOutcome("a", 3, None, U)]


# oracle: round-based inclusion ------------------------------------------------


def simulate(rate, round_ms, cap, seconds):
    """Drive the ledger core with a discrete clock: uniform arrivals, one block per round."""
    secret = b"q" * 32
    st_ = FabricState(1, 1, {"acct2": {"balance": 10**9, "secret": secret.hex()}, "acct3": {"balance": 0, "secret": "00"}}, cap)
    n = int(rate * seconds)
    arrivals = [int(k * 1000 / rate) for k in range(n)]
    k = 0
    horizon = seconds * 1000 + 10 * round_ms
    for r in range(1, horizon // round_ms + 1):
        t = r * round_ms
        while k < n and arrivals[k] < t:
            st_.admit(Transaction.create(secret, "acct2", "acct3", 1, k + 1, arrivals[k]), True)
            k += 1
        st_.propose(t)
    lat = [st_.status(Transaction.create(secret, "acct2", "acct3", 1, i + 1, arrivals[i]).tx_id)[2] - arrivals[i]
           for i in range(n)]
    return lat


def test_light_load_latency_is_half_a_round_on_average():
    lat = simulate(100, 500, 200, 10)
    assert sum(lat) / len(lat) == pytest.approx(250, abs=10)
    assert max(lat) <= 500


def test_capacity_is_block_size_per_round():
    # capacity 200 per 500 ms round = 400 tx/s
    below = simulate(380, 500, 200, 10)
    above = simulate(500, 500, 200, 10)
    assert max(below) <= 500
    # at 500 tx/s the backlog grows by 50 tx per round, so the last arrivals wait about 2.5 s
    assert max(above) > 2000


def test_bisection_refines_between_steps():
    calls = []
    res = saturation_search(ExperimentConfig(), 100, None, stub(437, calls), refine_to=10)
    assert calls[:5] == [100, 200, 300, 400, 500]
    assert calls[5:] == [450, 425, 437.5, 431.25]
    assert res.peak == 431.25 and is_monotone(res.steps)


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=200), st.sampled_from([10, 50, 100]))
def test_latency_stats_ordering(xs, bin_ms):
    s = LatencyStats.of(xs, bin_ms)
    assert s.min_ms <= s.median_ms <= s.p95_ms <= s.p99_ms <= s.max_ms
    assert s.count == len(xs) == sum(s.histogram)


@given(st.lists(st.tuples(st.integers(0, 5000), st.sampled_from([C, U, R]), st.integers(1, 900))))
def test_accounting_and_strict_saturation(rows):
    outs = [TxOutcome(f"t{i}", ts, ts + lat if status is C else None, status)
            for i, (ts, status, lat) in enumerate(rows)]
    r = RunResult.from_outcomes(outs, 100, 500)
    assert r.confirmed + r.unconfirmed + r.rejected == len(rows)
    assert r.latency.count == r.confirmed
    if r.unconfirmed:
        assert r.saturated
