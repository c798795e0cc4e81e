"""Command line front end: ``run``, ``sweep`` and ``calibrate``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ConfigError, InvariantViolation, ProcessKilled, Unsatisfiable
from .config import ScenarioConfig, load_config
from .report import StatsReport, emit, emit_rows
from .scenario import CalibrationTargets, calibrate, run_scenario, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdmafault", description="Simulate virtual-address RDMA with IOMMU page faults.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=("csv", "summary"), default="csv")

    sw = sub.add_parser("sweep", help="run a scenario across one axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, choices=("sizes", "timeouts", "policies"))
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")
    sw.add_argument("--format", choices=("csv", "summary"), default="csv")

    cal = sub.add_parser("calibrate", help="fit the per-packet cost to the 16 B anchor")
    cal.add_argument("--target-16b-us", type=float, default=4.0)
    cal.add_argument("--hops", type=int, default=0)
    cal.add_argument("--iterations", type=int, default=1000)
    cal.add_argument("--config")
    return p


def _write(data: bytes, out: str | None) -> None:
    if out is None:
        sys.stdout.write(data.decode())
        sys.stdout.flush()
    else:
        Path(out).write_bytes(data)


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _cmd_run(args) -> None:
    report = run_scenario(_load(args))
    _write(emit(report, args.format), args.out)


def _cmd_sweep(args) -> None:
    reports = run_sweep(_load(args), args.axis)
    if args.format == "csv":
        data = emit_rows([r for rep in reports for r in rep.rows])
    else:
        merged = StatsReport([r for rep in reports for r in rep.rows], reports[0].knobs)
        data = emit(merged, "summary")
    _write(data, args.out)


def _cmd_calibrate(args) -> None:
    base = load_config(args.config) if args.config else None
    rec = calibrate(CalibrationTargets(args.target_16b_us, args.hops, args.iterations), base)
    lines = [
        "[wire]",
        f"per_packet_ns = {rec.per_packet_ns!r}",
        f"ack_ns = {rec.ack_ns}",
        f"per_hop_ns = {rec.per_hop_ns}",
        f"# hops = {rec.hops}, target = {rec.target_us} us, achieved = {rec.achieved_us!r} us, "
        f"steps = {rec.steps}",
    ]
    sys.stdout.write("\n".join(lines) + "\n")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "calibrate": _cmd_calibrate}[args.command]
    try:
        handler(args)
    except (ConfigError, Unsatisfiable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, ProcessKilled) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
