"""Command line driver: sweep, calibrate, verify, bounds."""

from __future__ import annotations

import argparse
import sys

from . import harness


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--grid", required=True, help="grid config file (key = value)")
    sub.add_argument("--seed", type=int, default=None,
                     help="replace the seed list with this single seed")
    sub.add_argument("--out", default=None, help="output path")
    sub.add_argument("--algorithms", default=None,
                     help="comma-separated pipeline subset")
    sub.add_argument("--policy", choices=["crew", "erew"], default=None)


def _spec_from_args(args) -> harness.ExperimentSpec:
    spec = harness.load_spec(args.grid)
    if args.seed is not None:
        spec.seeds = [args.seed]
    if args.algorithms:
        names = [a.strip() for a in args.algorithms.split(",") if a.strip()]
        for a in names:
            if a not in harness.PIPELINES:
                raise SystemExit(f"unknown algorithm {a!r}")
        spec.algorithms = names
    if args.policy:
        spec.policy = args.policy
    if args.out:
        spec.output_path = args.out
    return spec


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pemshuffle",
        description="PEM shuffle-step simulator: sweeps, calibration, bound checks")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("sweep", "calibrate", "verify", "bounds"):
        _add_common(subs.add_parser(name))
    args = parser.parse_args(argv)
    spec = _spec_from_args(args)

    if args.command == "sweep":
        report = harness.run_sweep(spec)
        csv_text = report.to_csv()
        if spec.output_path:
            with open(spec.output_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(csv_text)
        else:
            sys.stdout.write(csv_text)
        ok = report.all_pass()
        print(f"{len(report.rows)} rows, "
              f"{sum(1 for r in report.rows if r['status'] == 'skipped')} skipped, "
              f"verdicts {'pass' if ok else 'FAIL'}", file=sys.stderr)
        return 0 if ok else 1

    if args.command == "calibrate":
        report = harness.run_sweep(spec)
        try:
            constants = harness.calibrate(report)
        except harness.CalibrationError as exc:
            print(f"calibration failed: {exc}", file=sys.stderr)
            return 1
        if spec.output_path:
            harness.write_constants(constants, spec.output_path)
        for algo in sorted(constants):
            c = constants[algo]
            print(f"{algo}: C1={c['C1']} C2={c['C2']}")
        return 0

    if args.command == "verify":
        report, verdicts = harness.verify(spec)
        if spec.output_path:
            harness.write_report(report, spec.output_path)
        for name, ok in (("budget", verdicts.budget_ok),
                         ("correctness", verdicts.correctness_ok),
                         ("potential", verdicts.potential_ok),
                         ("bounds", verdicts.bounds_ok)):
            print(f"{name}: {'pass' if ok else 'FAIL'}")
        for line in verdicts.failures[:20]:
            print(f"  {line}", file=sys.stderr)
        return 0 if verdicts.all_ok() else 1

    if args.command == "bounds":
        text = harness.bounds_catalog(spec)
        if spec.output_path:
            with open(spec.output_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
