"""Command line front end.

    toymol twobody|adiabatic|stats|bound4|scan|report [--config PATH] [--out DIR]
                                                      [--workers N] [--set key=value ...]

Exit status: 0 success, 2 configuration error, 3 numerical failure. Errors
are also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config
from .pipeline import (MixedHashError, Run, adiabatic_stage, bound4_stage, build_report, scan_stage,
                       stats_stage, twobody_stage, write_json)
from .spline_galerkin import ConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("toymol")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toymol", description="Four atoms on a line: curves, bound states, statistics.")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "twobody": "two-body levels and the dimer-pair reference energy",
        "adiabatic": "adiabatic curves on the R grid and the channel density",
        "stats": "spacing statistics, KDE curves and q(R)",
        "bound4": "zero-coupling four-body bound states and rho4",
        "scan": "rho4 scaling sweeps over D and r0",
        "report": "consolidated JSON summary of an output directory",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--workers", type=int, help="worker processes for the R scan")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. potential.D=50 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "scan":
            p.add_argument("--variable", choices=["D", "r0", "both"], default="both")
    return ap


def _error(kind: str, message: str, **extra) -> dict:
    return {"error": kind, "message": message, **extra}


def _summary(command: str, run: Run, result) -> dict:
    if command == "twobody":
        return {"E_b": result["E_b"], "counts": result["counts"]}
    if command == "adiabatic":
        return {p: r["summary"].get("probe_counts") for p, r in result.items()}
    if command == "bound4":
        return {p: {"count": s["count"], "rho4": s["rho4"]} for p, s in result["sectors"].items()}
    if command == "scan":
        return {v: {"exponent": r["fit"]["exponent"], "stderr": r["fit"]["stderr"]} for v, r in result.items()}
    return {"out": run.out}


def _execute(args, run: Run):
    cmd = args.command
    if cmd == "twobody":
        return twobody_stage(run)
    if cmd == "adiabatic":
        return {p: adiabatic_stage(run, p) for p in run.cfg.parities}
    if cmd == "stats":
        return stats_stage(run)
    if cmd == "bound4":
        return bound4_stage(run)
    if cmd == "scan":
        variables = ("D", "r0") if args.variable == "both" else (args.variable,)
        return scan_stage(run, variables)
    raise AssertionError(cmd)


def _report(args) -> int:
    out = args.out
    if out is None:
        try:
            out = load_config(args.config, args.set).out
        except ConfigError as exc:
            print(json.dumps(_error("config", exc.message, key=exc.key)), file=sys.stderr)
            return EXIT_CONFIG
    if not os.path.exists(os.path.join(out, "manifest.json")):
        print(json.dumps(_error("config", f"no manifest in {out}", key="out")), file=sys.stderr)
        return EXIT_CONFIG
    try:
        report, absent = build_report(out)
    except MixedHashError as exc:
        print(json.dumps(_error("config", str(exc), key="manifest")), file=sys.stderr)
        return EXIT_CONFIG
    write_json(os.path.join(out, "report.json"), report)
    if absent:
        print(json.dumps({"warning": "absent fields", "fields": absent}), file=sys.stderr)
    print(json.dumps(report["fields"], sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "report":
        return _report(args)
    try:
        cfg = load_config(args.config, args.set)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("workers", f"must be positive, got {args.workers}")
    except ConfigError as exc:
        print(json.dumps(_error("config", exc.message, key=exc.key)), file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(cfg, args.out, args.workers)
    except OSError as exc:
        print(json.dumps(_error("config", str(exc), key="out")), file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = _execute(args, run)
    except ConfigError as exc:
        err = _error("config", exc.message, key=exc.key)
        code = EXIT_CONFIG
    except OSError as exc:
        err = _error("config", str(exc), key="out")
        code = EXIT_CONFIG
    except (ConvergenceError, ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        err = _error("numerical", str(exc), type=type(exc).__name__)
        code = EXIT_NUMERIC
    else:
        run.save_manifest()
        print(json.dumps(_summary(args.command, run, result), sort_keys=True, default=float))
        return EXIT_OK
    run.save_manifest(err)
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
