"""Command-line entry point: ``cfho {simulate,compare,solve,export-cdf}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .harness import SCHEMES, SimConfig

log = logging.getLogger("cfho")

# CLI flag -> SimConfig field
_OVERRIDES = {
    "scheme": "scheme",
    "trials": "n_trials",
    "seed": "seed",
    "t_h": "t_h",
    "r_threshold": "r_threshold",
    "resolve_every": "resolve_every",
    "grid_size": "grid_size",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (SimConfig field names)")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-h", dest="t_h", type=int)
    p.add_argument("--r-threshold", dest="r_threshold", type=float)
    p.add_argument("--resolve-every", dest="resolve_every", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfho", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="Monte Carlo run of one scheme"))
    _common(sub.add_parser("compare", help="all three schemes on shared seeds"))
    p = sub.add_parser("solve", help="solve the handoff procedure for one trip snapshot")
    _common(p)
    p.add_argument("--cycle", type=int, default=0, help="decision cycle of the snapshot")
    p.add_argument("--trial", type=int, default=0, help="trial index of the snapshot")
    p = sub.add_parser("export-cdf", help="convert a JSON report to CSV")
    p.add_argument("--input", required=True, help="JSON report from simulate/compare")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> SimConfig:
    doc = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    for flag, name in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            doc[name] = val
    return SimConfig.from_dict(doc)


def _summary_lines(report: dict):
    yield f"r_threshold = {report['r_threshold']:g} bits/s/Hz"
    for sch, s in report["schemes"].items():
        yield (f"{sch:14s} mean switched DUs {s['mean_total_switches']:8.3f}  "
               f"p10 rate {s['quantiles']['p10']:7.3f}  "
               f"below threshold {100 * s['fraction_below_threshold']:6.2f}%")
    for base, red in report.get("reductions_percent", {}).items():
        yield f"reduction vs {base}: {red:.2f}%"


def _write(report, args):
    if args.out:
        harness.export(report, args.out, args.format)
        log.info("wrote %s", args.out)


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    report = harness.run_monte_carlo(cfg, (cfg.scheme,))
    for line in _summary_lines(report):
        print(line)
    _write(report, args)
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args)
    report = harness.run_monte_carlo(cfg, SCHEMES)
    for line in _summary_lines(report):
        print(line)
    _write(report, args)
    return 0


def cmd_solve(args) -> int:
    cfg = load_config(args)
    snap = harness.solve_snapshot(cfg, args.trial, args.cycle)
    text = json.dumps(snap, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


def cmd_export(args) -> int:
    harness.export(harness.load_report(args.input), args.out, "csv")
    return 0


_COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare, "solve": cmd_solve,
             "export-cdf": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError, json.JSONDecodeError, TypeError) as exc:
        print(f"cfho {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
