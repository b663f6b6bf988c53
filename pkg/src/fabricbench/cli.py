"""Command-line interface: ``fabricbench {run,search,report,netem}``.

Flags override keys of the configuration file, which override defaults.
Exit codes: 0 success, 1 experiment error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .model import ConfigError, ExperimentConfig

log = logging.getLogger("fabricbench")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# flag -> config key
OVERRIDES = {
    "rate": "tx_rate",
    "validators": "n_validators",
    "clients": "n_clients",
    "issue": "issue_duration",
    "drain": "drain_duration",
    "seed": "rng_seed",
    "degree": "topology_degree",
    "repetitions": "repetitions",
    "round_ms": "round_duration_ms",
    "block_capacity": "block_capacity",
    "matrix": "latency_matrix_path",
    "launch_mode": "launch_mode",
    "time_scale": "time_scale",
    "poll_ms": "poll_interval_ms",
    "hosts": "hosts",
}


class UsageError(Exception):
    pass


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="experiment configuration file (key = value)")
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--rate", type=float, help="system-wide offered rate in tx/s")
    g.add_argument("--validators", type=int, help="number of validators")
    g.add_argument("--clients", type=int, help="number of clients")
    g.add_argument("--issue", type=float, help="issue window in seconds")
    g.add_argument("--drain", type=float, help="drain window in seconds")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--degree", type=int, help="validator topology out-degree")
    g.add_argument("--repetitions", type=int, help="runs per setting")
    g.add_argument("--round-ms", type=int, help="reference fabric round duration in ms")
    g.add_argument("--block-capacity", type=int, help="reference fabric transactions per block")
    g.add_argument("--matrix", help="city latency matrix CSV")
    g.add_argument("--launch-mode", choices=("process", "inproc"), help="one process per instance, or one loop")
    g.add_argument("--time-scale", type=float, help="factor applied to every scenario offset and window")
    g.add_argument("--poll-ms", type=int, help="client confirmation polling interval (0 disables)")
    g.add_argument("--hosts", help="comma-separated host[:workdir] list")
    p.add_argument("--results", help="results root (default: $GROMIT_RESULTS_DIR or ./results)")


def load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"--config: no such file: {path}")
    overrides = {key: getattr(args, flag) for flag, key in OVERRIDES.items() if getattr(args, flag, None) is not None}
    try:
        return ExperimentConfig.load(path, **overrides)
    except ConfigError as exc:
        raise UsageError(f"--config: {exc}") from None


def _root(args):
    from .orchestrator import results_root

    return Path(args.results) if args.results else results_root()


def cmd_run(args) -> int:
    from .orchestrator import place, run_experiment
    from .scenario import ScenarioRangeError, ScenarioSyntaxError, parse_scenario

    config = load_config(args)
    spath = Path(args.scenario)
    if not spath.is_file():
        raise UsageError(f"--scenario: no such file: {spath}")
    try:
        scenario = parse_scenario(spath.read_text(encoding="utf-8"),
                                  all_instances=range(1, config.n_instances + 1))
        scenario.validate()
    except (ScenarioSyntaxError, ScenarioRangeError, ValueError) as exc:
        raise UsageError(f"--scenario: {exc}") from None
    if args.dry_run:
        for i, host in place(config).items():
            role = "validator" if i <= config.n_validators else "client"
            actions = ", ".join(f"@{a.at} {a.action}" for a in scenario.for_instance(i))
            print(f"{i:>4} {role:<9} {host}  {actions}")
        return EXIT_OK
    results = []
    for k in range(config.repetitions):
        res = run_experiment(config, scenario, root=_root(args), setting=args.setting or "", charts=True)
        results.append(res.run)
        r = res.run
        print(f"run {k + 1}: {res.run_dir}  confirmed={r.confirmed} unconfirmed={r.unconfirmed} "
              f"rejected={r.rejected} saturated={str(r.saturated).lower()} "
              f"mean_latency_ms={r.latency.mean_ms:.1f}")
        if r.integrity.get("conserved") is False or r.integrity.get("chains_agree") is False:
            print("integrity check failed: " + json.dumps(r.integrity), file=sys.stderr)
            return EXIT_FAIL
    if len(results) > 1:
        from .analysis import report

        out = _root(args) / "reports" / Path(results[-1].run_dir).name
        report({results[0].setting: results}, out, charts=True)
        print(f"aggregate report: {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    from .analysis import report, saturation_search
    from .orchestrator import run_experiment

    config = load_config(args)
    if args.step <= 0:
        raise UsageError("--step: must be > 0")
    root = _root(args)

    def runner(cfg):
        return run_experiment(cfg, root=root, setting=f"rate={cfg.tx_rate:g}").run

    if args.refine is not None and args.refine <= 0:
        raise UsageError("--refine: must be > 0")
    res = saturation_search(config, args.step, args.max_rate, runner, refine_to=args.refine)
    out = root / "search" / Path(res.steps[-1][1][-1].run_dir or "search").name
    ordered = sorted(res.steps, key=lambda s: s[0])
    report({f"rate={rate:g}": rs for rate, rs in ordered}, out,
           peak={f"rate={rate:g}": res.peak for rate, _ in ordered}, charts=True)
    bound = " (not saturated within bounds)" if res.bound_hit else ""
    print(f"peak throughput: {res.peak:g} tx/s{bound}")
    if not res.monotone:
        print("warning: saturation was not monotone in the offered rate; infrastructure may be flaky",
              file=sys.stderr)
    print(f"per-step results: {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .analysis import MissingArtifacts, load_results, report

    d = Path(args.results_dir)
    if not d.is_dir():
        raise UsageError(f"results_dir: no such directory: {d}")
    try:
        results = load_results(d)
    except MissingArtifacts as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out) if args.out else d / "report"
    files = report(results, out, charts=not args.no_charts)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_netem(args) -> int:
    from .netshape import LatencyMatrix, MatrixError, assign_cities, emit_netem_script
    from .orchestrator import plan_deployment

    config = load_config(args)
    try:
        matrix = LatencyMatrix.load(args.matrix_file)
    except FileNotFoundError:
        raise UsageError(f"matrix: no such file: {args.matrix_file}") from None
    except MatrixError as exc:
        print(f"invalid matrix: {exc}", file=sys.stderr)
        return EXIT_FAIL
    plan = plan_deployment(config, Path("netem"))
    # the script must not depend on locally allocated ports
    from dataclasses import replace

    from .orchestrator import REMOTE_BASE_PORT

    plan = replace(plan, instances={i: replace(p, peer_port=REMOTE_BASE_PORT + 2 * i + 1)
                                    for i, p in plan.instances.items()})
    text = emit_netem_script(assign_cities(config.n_validators, matrix), matrix, plan)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fabricbench", description="benchmark harness for transaction fabrics")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a configuration and a scenario")
    _config_flags(p)
    p.add_argument("-s", "--scenario", required=True, help="scenario file")
    p.add_argument("--setting", help="label for this setting in reports")
    p.add_argument("--dry-run", action="store_true", help="print the deployment plan and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("search", help="find the peak throughput by raising the rate step by step")
    _config_flags(p)
    p.add_argument("--step", type=float, default=100.0, help="rate increment in tx/s (default 100)")
    p.add_argument("--max-rate", type=float, default=None, help="highest rate to try (default 100 steps)")
    p.add_argument("--refine", type=float, default=None, metavar="TX_S",
                   help="bisect above the peak until the bracket is at most this wide (default off)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="regenerate reports from collected run directories")
    p.add_argument("results_dir", help="directory containing run directories")
    p.add_argument("--out", help="output directory (default: <results_dir>/report)")
    p.add_argument("--no-charts", action="store_true", help="write CSV files only")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("netem", help="emit a tc/netem script for geo-distributed delays")
    p.add_argument("-c", "--config", required=True, help="experiment configuration file")
    p.add_argument("matrix_file", help="city latency matrix CSV")
    p.add_argument("--out", help="script path (default: stdout)")
    p.add_argument("--hosts", help="comma-separated host[:workdir] list")
    p.add_argument("--validators", type=int, help="number of validators")
    p.set_defaults(func=cmd_netem)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - reported as an experiment error
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
