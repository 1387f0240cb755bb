"""Command-line front end.

    bec roundtrips [--protocol basic|bloom] [--sweep 1,2,4] [--out FILE]
    bec bandwidth  [--protocol basic|bloom] [--sweep 1,2,4] [--out FILE]
    bec verify     [--seeds N] [--trials N]
    bec run SCENARIO [--out FILE]

Exit status is 0 on success, 1 when a property check fails and 2 for a bad
configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .sim.config import load_scenario
from .sim.engine import run_scenario
from .sim.experiments import DEFAULT_SWEEP, bandwidth_csv, roundtrips_csv, sweep
from .sim.trace import assert_trace_properties
from .sim.verify import verify_all
from .sync import Protocol

log = logging.getLogger("bec")


def _sweep_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("sweep values must be positive")
    return values


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)
        log.info("wrote %s", out)


def _add_sweep_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", choices=[x.value for x in Protocol], help="default: both")
    p.add_argument("--replicas", type=int, default=4)
    p.add_argument("--pairs-recons", type=int, default=100, help="reconciliations per replica pair")
    p.add_argument("--sweep", type=_sweep_values, default=list(DEFAULT_SWEEP), help="updates per interval, e.g. 1,2,4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.add_argument("--bloom-bits", type=int, default=10, help="bits per filter entry")
    p.add_argument("--bloom-hashes", type=int, default=7, help="index functions per entry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bec", description="Byzantine causal broadcast experiments and checks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    rt = sub.add_parser("roundtrips", help="round trips per reconciliation across a sweep")
    _add_sweep_args(rt)
    bw = sub.add_parser("bandwidth", help="bytes per reconciliation across a sweep")
    _add_sweep_args(bw)

    ver = sub.add_parser("verify", help="adversary matrix, commutativity and detector self-tests")
    ver.add_argument("--seeds", type=int, default=3, help="seeds per strategy")
    ver.add_argument("--trials", type=int, default=30, help="random workloads for the commutativity check")

    run = sub.add_parser("run", help="run one scenario file and print per-reconciliation stats")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path)
    return parser


def _cmd_sweep(args: argparse.Namespace, to_csv) -> int:
    if args.replicas < 2 or args.pairs_recons < 1:
        raise ConfigError("need at least two replicas and one reconciliation per pair")
    protocols = [Protocol(args.protocol)] if args.protocol else list(Protocol)
    points = sweep(
        protocols,
        args.sweep,
        replicas=args.replicas,
        pairs_recons=args.pairs_recons,
        seed=args.seed,
        bloom_bits=args.bloom_bits,
        bloom_hashes=args.bloom_hashes,
    )
    _emit(to_csv(points), args.out)
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    report = verify_all(seeds=range(args.seeds), trials=args.trials)
    failed = 0
    for name, failures in report.items():
        status = "ok" if not failures else f"FAILED ({len(failures)})"
        print(f"{name:40} {status}")
        for f in failures[:5]:
            print(f"    {f}")
        failed += bool(failures)
    return 1 if failed else 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.scenario)
    result = run_scenario(cfg)
    _emit(result.stats.to_csv(result.names), args.out)
    report = assert_trace_properties(result)
    if not report.ok:
        print(report.summary(), file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "roundtrips":
            return _cmd_sweep(args, roundtrips_csv)
        if args.command == "bandwidth":
            return _cmd_sweep(args, bandwidth_csv)
        if args.command == "verify":
            return _cmd_verify(args)
        return _cmd_run(args)
    except (ConfigError, OSError) as exc:
        print(f"bec: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
