"""Turning submission logs and ledgers into throughput and latency results.

A run is *saturated* when transactions are still unconfirmed once the drain
window is over, or when confirmed throughput falls behind the offered rate
during the steady part of the issue window (see :func:`sustained_ratio`).
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .model import ExperimentConfig, TxOutcome, TxStatus

log = logging.getLogger(__name__)

SUSTAIN_THRESHOLD = 0.9
SUSTAIN_MIN_SAMPLES = 50
SUSTAIN_WARMUP = 0.25


class DuplicateConfirmation(ValueError):
    pass


class DeadlineExceeded(TimeoutError):
    pass


class MissingArtifacts(FileNotFoundError):
    def __init__(self, missing: dict):
        self.missing = missing
        super().__init__("missing artifacts: " + "; ".join(f"{i}: {', '.join(f)}" for i, f in sorted(missing.items())))


# latency statistics ------------------------------------------------------------


def nearest_rank(sorted_values: list, q: float):
    """Nearest-rank percentile of an ascending list, ``q`` in (0, 100]."""
    if not sorted_values:
        raise ValueError("empty sample")
    k = max(1, math.ceil(q / 100.0 * len(sorted_values)))
    return sorted_values[k - 1]


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    p99_ms: float
    min_ms: float
    max_ms: float
    bin_ms: float
    histogram: tuple  # counts per bin starting at 0

    @classmethod
    def of(cls, latencies: Iterable[float], bin_ms: Optional[float] = None) -> "LatencyStats":
        xs = sorted(latencies)
        bin_ms = bin_ms or 100.0
        if not xs:
            return cls(0, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, bin_ms, ())
        hist = [0] * (int(max(xs[-1], 0) // bin_ms) + 1)
        for x in xs:
            hist[int(max(x, 0) // bin_ms)] += 1
        return cls(len(xs), statistics.fmean(xs), nearest_rank(xs, 50), nearest_rank(xs, 95),
                   nearest_rank(xs, 99), xs[0], xs[-1], bin_ms, tuple(hist))


# joining -----------------------------------------------------------------------


@dataclass
class SubmissionRow:
    tx_id: str
    client_id: int
    validator_id: int
    submit_ts: int
    status: str


def read_submissions(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SubmissionRow(r["tx_id"], int(r["client_id"]), int(r["validator_id"]), int(r["submit_ts_ms"]),
                              r["status"]) for r in csv.DictReader(fh)]


def join_outcomes(submissions: list, ledger_outcomes: list) -> tuple:
    """One outcome per submitted transaction; returns ``(outcomes, foreign_ids)``.

    Latency is measured from the client's own submission time. Transactions
    found in the ledger but never submitted by a client are returned as
    foreign and left out of the outcomes.
    """
    confirmed: dict = {}
    other: dict = {}
    for o in ledger_outcomes:
        if o.status is TxStatus.CONFIRMED:
            if o.tx_id in confirmed:
                raise DuplicateConfirmation(f"transaction {o.tx_id} appears in the ledger twice")
            confirmed[o.tx_id] = o
        else:
            other.setdefault(o.tx_id, o)
    out = []
    submitted = set()
    for s in submissions:
        if s.tx_id in submitted:
            raise ValueError(f"transaction {s.tx_id} submitted twice")
        submitted.add(s.tx_id)
        c = confirmed.get(s.tx_id)
        if c is not None:
            out.append(TxOutcome(s.tx_id, s.submit_ts, max(c.confirm_ts, s.submit_ts), TxStatus.CONFIRMED))
        elif s.status.startswith("Rejected") or \
                (s.tx_id in other and other[s.tx_id].status is TxStatus.REJECTED):
            out.append(TxOutcome(s.tx_id, s.submit_ts, None, TxStatus.REJECTED))
        else:
            out.append(TxOutcome(s.tx_id, s.submit_ts, None, TxStatus.UNCONFIRMED))
    foreign = sorted(set(confirmed) - submitted)
    if foreign:
        log.warning("ForeignTx: %d ledger transactions were not submitted by any client", len(foreign))
    return out, foreign


def sustained_ratio(outcomes: list, warmup: float = SUSTAIN_WARMUP, lag_ms: Optional[float] = None,
                    fallback_lag_ms: float = 0.0) -> tuple:
    """Confirmations over submissions inside the steady part of the issue window.

    The window starts after ``warmup`` of the submission span and ends at the
    last submission; confirmations are counted over the same window shifted
    by ``lag_ms``. By default the lag is the median latency of transactions
    submitted during warmup, before any backlog can build up, or
    ``fallback_lag_ms`` when none of them confirmed.
    Returns ``(ratio, submissions_in_window)``; the ratio is 1.0 for an
    empty window.
    """
    subs = [o.submit_ts for o in outcomes]
    if not subs:
        return 1.0, 0
    t0, t1 = min(subs), max(subs)
    lo = t0 + warmup * (t1 - t0)
    if lag_ms is None:
        early = sorted(o.latency for o in outcomes if o.submit_ts < lo and o.latency is not None)
        lag_ms = statistics.median(early) if early else fallback_lag_ms
    n_sub = sum(1 for t in subs if lo <= t <= t1)
    n_conf = sum(1 for o in outcomes if o.confirm_ts is not None and lo + lag_ms <= o.confirm_ts <= t1 + lag_ms)
    if n_sub == 0:
        return 1.0, 0
    return n_conf / n_sub, n_sub


# run results --------------------------------------------------------------------


@dataclass
class RunResult:
    offered_rate: float
    confirmed: int
    unconfirmed: int
    rejected: int
    saturated: bool
    latency: LatencyStats
    sustained: float = 1.0
    n_validators: int = 0
    issue_s: float = 0.0
    setting: str = ""
    run_dir: str = ""
    failed: bool = False
    outcomes: list = field(default_factory=list, repr=False)
    resources: list = field(default_factory=list, repr=False)
    integrity: dict = field(default_factory=dict)

    @property
    def submitted(self) -> int:
        return self.confirmed + self.unconfirmed + self.rejected

    @property
    def throughput(self) -> float:
        return self.confirmed / self.issue_s if self.issue_s > 0 else 0.0

    @classmethod
    def from_outcomes(cls, outcomes: list, offered_rate: float, round_ms: Optional[float] = None,
                      **kw) -> "RunResult":
        conf = [o for o in outcomes if o.status is TxStatus.CONFIRMED]
        unconf = sum(1 for o in outcomes if o.status is TxStatus.UNCONFIRMED)
        rej = sum(1 for o in outcomes if o.status is TxStatus.REJECTED)
        ratio, n_win = sustained_ratio(outcomes, fallback_lag_ms=round_ms or 0.0)
        saturated = unconf > 0 or (n_win >= SUSTAIN_MIN_SAMPLES and ratio < SUSTAIN_THRESHOLD)
        stats = LatencyStats.of((o.latency for o in conf), round_ms / 10.0 if round_ms else None)
        return cls(offered_rate, len(conf), unconf, rej, saturated, stats, ratio, outcomes=outcomes, **kw)

    @classmethod
    def failure(cls, offered_rate: float, reason: str, **kw) -> "RunResult":
        log.warning("run at %s tx/s failed (%s); counted as saturated", offered_rate, reason)
        return cls(offered_rate, 0, 0, 0, True, LatencyStats.of([]), 0.0, failed=True,
                   integrity={"error": reason}, **kw)


def heartbeat_gaps(ts_ms: list, cadence_ms: float) -> list:
    """Gaps longer than three cadences, as ``(from_ms, to_ms)`` pairs."""
    return [(a, b) for a, b in zip(ts_ms, ts_ms[1:]) if b - a > 3 * cadence_ms]


def _read_column(path, column: str) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [int(float(r[column])) for r in csv.DictReader(fh)]


def instance_resources(run_dir, plan, config) -> list:
    from .telemetry import read_samples, utilization

    rows = []
    for i in sorted(plan.instances):
        p = Path(run_dir) / str(i) / "metrics.csv"
        if not p.exists():
            continue
        samples = read_samples(p)
        if not samples:
            continue
        last = samples[-1]
        rows.append({"instance": i, "role": plan.instances[i].role, "cpu_util": utilization(samples),
                     "cpu_time_s": last["cpu_time_s"], "mem_rss_bytes": int(last["mem_rss_bytes"]),
                     "net_in_bytes": int(last["net_in_bytes"]), "net_out_bytes": int(last["net_out_bytes"])})
    return rows


def parse_run(run_dir, setting: str = "") -> RunResult:
    """Analyse one collected run directory."""
    from .adapter import get_adapter
    from .model import DeploymentPlan

    run_dir = Path(run_dir)
    config = ExperimentConfig.load(run_dir / "experiment.conf")
    plan = DeploymentPlan.from_json(json.loads((run_dir / "plan.json").read_text()))
    missing = {}
    subs = []
    for c in plan.clients:
        p = run_dir / str(c) / "submissions.csv"
        if p.exists():
            subs.extend(read_submissions(p))
        else:
            missing.setdefault(c, []).append("submissions.csv")
    artifacts = {}
    for v in plan.validators:
        d = run_dir / str(v)
        if (d / "ledger.jsonl").exists():
            artifacts[v] = d
        else:
            missing.setdefault(v, []).append("ledger.jsonl")
    if missing:
        log.warning("%s", MissingArtifacts(missing))
    adapter_cls = get_adapter(config.adapter)
    adapter = adapter_cls()
    outcomes, foreign = join_outcomes(subs, adapter.parse_ledger(artifacts))
    integrity = {"foreign_txs": len(foreign), "missing": {str(k): v for k, v in missing.items()}}
    genesis_path = run_dir / "genesis.json"
    if genesis_path.exists() and hasattr(adapter, "verify"):
        integrity.update(adapter.verify(artifacts, json.loads(genesis_path.read_text())))
    unhealthy = []
    for i in sorted(plan.instances):
        hb = run_dir / str(i) / "heartbeat.csv"
        if hb.exists() and heartbeat_gaps(_read_column(hb, "ts_ms"), config.heartbeat_interval_ms):
            unhealthy.append(i)
    integrity["unhealthy"] = unhealthy
    return RunResult.from_outcomes(
        outcomes, config.tx_rate, config.fabric_params.round_duration,
        n_validators=config.n_validators, issue_s=config.issue_duration * config.time_scale,
        setting=setting, run_dir=str(run_dir), resources=instance_resources(run_dir, plan, config),
        integrity=integrity)


# polling -------------------------------------------------------------------------


class ConfirmationPoller:
    """Polls a wallet for tracked transactions until each is confirmed.

    The confirmation time of a transaction is the time of the first poll
    reply reporting it confirmed, so it is accurate to one poll interval.
    """

    def __init__(self, wallet, epoch_ms: int, interval_ms: int = 100):
        self.wallet = wallet
        self.epoch_ms = epoch_ms
        self.interval_ms = interval_ms
        self.pending: dict = {}  # tx_id -> submit_ts
        self.done: dict = {}  # tx_id -> TxOutcome

    def track(self, tx_id: str, submit_ts: int) -> None:
        self.pending[tx_id] = submit_ts

    async def poll_once(self) -> None:
        ids = list(self.pending)
        if not ids:
            return
        replies = await self.wallet.status(ids)
        now = int(time.time() * 1000) - self.epoch_ms
        for tx_id, fields in replies.items():
            if tx_id not in self.pending or not fields:
                continue
            if fields[0] == "CONFIRMED":
                sub = self.pending.pop(tx_id)
                self.done[tx_id] = TxOutcome(tx_id, sub, max(now, sub), TxStatus.CONFIRMED)
            elif fields[0] == "REJECTED":
                sub = self.pending.pop(tx_id)
                self.done[tx_id] = TxOutcome(tx_id, sub, None, TxStatus.REJECTED)

    async def run(self, stop: asyncio.Event) -> None:
        while not stop.is_set():
            try:
                await self.poll_once()
            except ConnectionError as exc:
                log.warning("poll failed: %s", exc)
                return
            try:
                await asyncio.wait_for(stop.wait(), self.interval_ms / 1000.0)
            except asyncio.TimeoutError:
                pass

    def outcomes(self) -> list:
        rest = [TxOutcome(t, s, None, TxStatus.UNCONFIRMED) for t, s in self.pending.items()]
        return list(self.done.values()) + rest

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("tx_id,submit_ts_ms,confirm_ts_ms,status\n")
            for o in self.outcomes():
                fh.write(f"{o.tx_id},{o.submit_ts},{'' if o.confirm_ts is None else o.confirm_ts},{o.status.value}\n")


async def poll_confirmations(tx_ids: dict, wallet, interval_ms: int, deadline_s: float,
                             epoch_ms: int = 0) -> list:
    """Poll until every transaction in ``tx_ids`` (id -> submit_ts) is settled
    or ``deadline_s`` passes; leftovers are Unconfirmed."""
    poller = ConfirmationPoller(wallet, epoch_ms, interval_ms)
    for t, s in tx_ids.items():
        poller.track(t, s)
    stop = asyncio.Event()
    task = asyncio.ensure_future(poller.run(stop))
    end = time.monotonic() + deadline_s
    while poller.pending and time.monotonic() < end:
        await asyncio.sleep(min(interval_ms / 1000.0, max(end - time.monotonic(), 0)))
    stop.set()
    await task
    if poller.pending:
        log.warning("%s", DeadlineExceeded(f"{len(poller.pending)} transactions unconfirmed at deadline"))
    return poller.outcomes()


def read_polls(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            c = int(r["confirm_ts_ms"]) if r["confirm_ts_ms"] else None
            out.append(TxOutcome(r["tx_id"], int(r["submit_ts_ms"]), c, TxStatus(r["status"])))
    return out


# saturation search -----------------------------------------------------------


@dataclass
class SearchResult:
    peak: float
    steps: list  # (rate, [RunResult, ...])
    bound_hit: bool
    monotone: bool = True

    @property
    def runs(self) -> int:
        return sum(len(rs) for _, rs in self.steps)


def saturation_search(base_config: ExperimentConfig, step: float = 100.0, max_rate: Optional[float] = None,
                      runner: Optional[Callable[[ExperimentConfig], RunResult]] = None,
                      repetitions: Optional[int] = None, refine_to: Optional[float] = None) -> SearchResult:
    """Raise the offered rate by ``step`` until a run saturates.

    The peak is the highest rate that did not saturate. A step counts as
    saturated when any of its repetitions is; a run that fails outright
    counts as saturated. With ``refine_to`` the interval between the peak
    and the first saturated step is then bisected until it is at most
    ``refine_to`` wide.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    if refine_to is not None and refine_to <= 0:
        raise ValueError("refine_to must be > 0")
    if runner is None:
        from .orchestrator import run_experiment

        def runner(cfg):
            return run_experiment(cfg).run
    reps = repetitions or base_config.repetitions
    max_rate = max_rate if max_rate is not None else step * 100
    steps = []

    def run_step(rate: float) -> bool:
        results = []
        for r in range(reps):
            cfg = base_config.with_rate(rate)
            try:
                res = runner(cfg)
            except Exception as exc:  # noqa: BLE001 - failed runs count as saturated
                res = RunResult.failure(rate, f"{type(exc).__name__}: {exc}")
            res.setting = res.setting or f"rate={rate:g}"
            results.append(res)
            log.info("rate %g rep %d: confirmed %d unconfirmed %d sustained %.3f saturated %s", rate, r + 1,
                     res.confirmed, res.unconfirmed, res.sustained, res.saturated)
        steps.append((rate, results))
        return any(res.saturated for res in results)

    peak = 0.0
    k = 1
    while True:
        rate = step * k
        if rate > max_rate + 1e-9:
            log.info("not saturated within bounds: peak %.0f tx/s", peak)
            return SearchResult(peak, steps, True, is_monotone(steps))
        if run_step(rate):
            break
        peak = rate
        k += 1
    if refine_to is not None:
        lo, hi = peak, rate
        while hi - lo > refine_to + 1e-9:
            mid = (lo + hi) / 2
            if run_step(mid):
                hi = mid
            else:
                lo = mid
        peak = lo
    return SearchResult(peak, steps, False, is_monotone(steps))


def is_monotone(steps: list) -> bool:
    """Once a rate saturates, every higher tested rate must saturate too."""
    seen = False
    for _, results in sorted(steps, key=lambda s: s[0]):
        sat = any(r.saturated for r in results)
        if seen and not sat:
            return False
        seen = seen or sat
    return True


# aggregation -----------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    n: int
    mean: float
    half_width: Optional[float]

    @property
    def ci(self) -> Optional[tuple]:
        if self.half_width is None:
            return None
        return self.mean - self.half_width, self.mean + self.half_width


def mean_ci(values: Iterable[float], confidence: float = 0.95) -> Aggregate:
    """Mean and two-sided t-interval with n-1 degrees of freedom."""
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("no values")
    m = statistics.fmean(xs)
    if len(xs) < 2:
        return Aggregate(len(xs), m, None)
    from scipy import stats

    s = statistics.stdev(xs)
    t = stats.t.ppf(0.5 + confidence / 2, len(xs) - 1)
    return Aggregate(len(xs), m, float(t * s / math.sqrt(len(xs))))


def aggregate_runs(results: list) -> dict:
    """Per-metric aggregates over repeated runs of one setting."""
    if not results:
        raise ValueError("no results")
    metrics = {
        "mean_latency_ms": [r.latency.mean_ms for r in results if r.latency.count],
        "median_latency_ms": [r.latency.median_ms for r in results if r.latency.count],
        "throughput_tps": [r.throughput for r in results],
        "confirmed": [r.confirmed for r in results],
        "unconfirmed": [r.unconfirmed for r in results],
    }
    return {k: mean_ci(v) for k, v in metrics.items() if v}


# report --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.4f}".rstrip("0").rstrip(".")
    return str(x)


AGGREGATE_HEADER = "setting,offered_rate,runs,peak,mean_latency_ms,ci95_ms,confirmed,unconfirmed,saturated"


def report(results: dict, out_dir, peak: Optional[dict] = None, charts: bool = True) -> dict:
    """Write the report bundle for ``{setting: [RunResult, ...]}``.

    Returns a mapping of artifact name to path. Output depends only on the
    results, so identical inputs give identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    peak = peak or {}
    files = {}

    for setting, runs in results.items():
        for k, r in enumerate(runs, 1):
            p = out / f"run_{_slug(setting)}_{k}.csv"
            with open(p, "w", encoding="utf-8") as fh:
                fh.write("tx_id,submit_ts_ms,confirm_ts_ms,latency_ms,status\n")
                for o in sorted(r.outcomes, key=lambda o: (o.submit_ts, o.tx_id)):
                    fh.write(f"{o.tx_id},{o.submit_ts},{_fmt(o.confirm_ts)},{_fmt(o.latency)},{o.status.value}\n")
            files[p.name] = p

    p = out / "aggregate.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(AGGREGATE_HEADER + "\n")
        for setting, runs in results.items():
            agg = aggregate_runs(runs)
            lat = agg.get("mean_latency_ms")
            rate = runs[0].offered_rate
            fh.write(",".join([
                setting, _fmt(float(rate)), str(len(runs)), _fmt(peak.get(setting)),
                _fmt(lat.mean if lat else None), _fmt(lat.half_width if lat else None),
                _fmt(agg["confirmed"].mean), _fmt(agg["unconfirmed"].mean),
                "true" if any(r.saturated for r in runs) else "false",
            ]) + "\n")
    files[p.name] = p

    p = out / "latency_distribution.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("setting,run,latency_ms\n")
        for setting, runs in results.items():
            for k, r in enumerate(runs, 1):
                for lat in sorted(o.latency for o in r.outcomes if o.latency is not None):
                    fh.write(f"{setting},{k},{lat}\n")
    files[p.name] = p

    p = out / "latency_summary.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("setting,run,count,mean_ms,min_ms,median_ms,p95_ms,p99_ms,max_ms\n")
        for setting, runs in results.items():
            for k, r in enumerate(runs, 1):
                s = r.latency
                fh.write(",".join([setting, str(k), str(s.count)] + [_fmt(float(v)) for v in (
                    s.mean_ms, s.min_ms, s.median_ms, s.p95_ms, s.p99_ms, s.max_ms)]) + "\n")
    files[p.name] = p

    p = out / "series.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("setting,n_validators,offered_rate,throughput_tps,throughput_ci95,mean_latency_ms,latency_ci95_ms\n")
        for setting, runs in results.items():
            agg = aggregate_runs(runs)
            tp = agg["throughput_tps"]
            lat = agg.get("mean_latency_ms")
            fh.write(",".join([setting, str(runs[0].n_validators), _fmt(float(runs[0].offered_rate)),
                               _fmt(tp.mean), _fmt(tp.half_width), _fmt(lat.mean if lat else None),
                               _fmt(lat.half_width if lat else None)]) + "\n")
    files[p.name] = p

    p = out / "resources.csv"
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("setting,offered_rate,run,instance,role,cpu_util,mem_rss_bytes,net_in_bytes,net_out_bytes\n")
        for setting, runs in results.items():
            for k, r in enumerate(runs, 1):
                for row in r.resources:
                    fh.write(f"{setting},{_fmt(float(r.offered_rate))},{k},{row['instance']},{row['role']},"
                             f"{row['cpu_util']:.4f},{row['mem_rss_bytes']},{row['net_in_bytes']},"
                             f"{row['net_out_bytes']}\n")
    files[p.name] = p

    if charts:
        files.update(render_charts(results, out))
    return files


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in s) or "run"


def render_charts(results: dict, out: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fabricbench"
    files = {}
    settings = list(results)

    def save(fig, name):
        p = out / name
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        files[name] = p

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(settings)), 3.5))
    data = [[o.latency for r in results[s] for o in r.outcomes if o.latency is not None] or [0] for s in settings]
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(settings) + 1), settings, rotation=30, ha="right")
    ax.set_ylabel("latency (ms)")
    fig.tight_layout()
    save(fig, "latency_distribution.svg")

    xs = list(range(len(settings)))
    aggs = [aggregate_runs(results[s]) for s in settings]
    for key, label, name in (("throughput_tps", "confirmed tx/s", "throughput.svg"),
                             ("mean_latency_ms", "mean latency (ms)", "latency.svg")):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(settings)), 3.5))
        ys = [a[key].mean if key in a else math.nan for a in aggs]
        err = [(a[key].half_width or 0) if key in a else 0 for a in aggs]
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3)
        ax.set_xticks(xs, settings, rotation=30, ha="right")
        ax.set_ylabel(label)
        fig.tight_layout()
        save(fig, name)

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(settings)), 3.5))
    cpu = []
    for s in settings:
        vals = [row["cpu_util"] for r in results[s] for row in r.resources if row["role"] == "Validator"]
        cpu.append(statistics.fmean(vals) if vals else 0.0)
    ax.bar(xs, cpu)
    ax.set_xticks(xs, settings, rotation=30, ha="right")
    ax.set_ylabel("validator CPU (cores)")
    fig.tight_layout()
    save(fig, "resources.svg")
    return files


def load_results(results_dir) -> dict:
    """Re-parse every run directory below ``results_dir``, grouped by setting.

    The setting of a run is its directory's ``setting`` file if present,
    else its offered rate.
    """
    root = Path(results_dir)
    run_dirs = sorted(p.parent for p in root.rglob("experiment.conf") if (p.parent / "plan.json").exists())
    if not run_dirs:
        raise MissingArtifacts({0: [f"no run directories under {root}"]})
    grouped: dict = {}
    for d in run_dirs:
        label_file = d / "setting"
        if label_file.exists():
            setting = label_file.read_text().strip()
        else:
            setting = f"rate={ExperimentConfig.load(d / 'experiment.conf').tx_rate:g}"
        grouped.setdefault(setting, []).append(parse_run(d, setting))
    return grouped
