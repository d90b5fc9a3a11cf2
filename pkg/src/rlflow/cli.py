"""Command line: ``rlflow run | report | validate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import RLFlowError, ScenarioError
from .scenario import list_presets, load_scenario


def _cmd_run(args) -> int:
    from .harness import run, run_live

    sc = load_scenario(args.scenario)
    if args.versions is not None:
        from dataclasses import replace

        sc = replace(sc, run_versions=args.versions)
    if args.mode == "live":
        res = run_live(sc, args.seed, args.out, time_scale=args.time_scale, timeout=args.timeout)
    else:
        res = run(sc, args.seed, args.out)
    s = res.summary
    print(f"scenario {s['scenario']} seed {s['seed']}: {s['simulated_seconds']:.2f} s simulated, "
          f"{s['rollout_gpu_hours']:.4f} rollout GPU-hours, {s['windows']} report windows")
    for p, t in s["trainers"].items():
        print(f"  trainer {p}: {t['versions_published']} versions, wait {t['wait_seconds']:.2f} s, "
              f"busy {t['busy_seconds']:.2f} s")
    print(f"  conservation balanced: {s['conservation']['balanced']}")
    print(f"  output written to {args.out}")
    return 0 if s["conservation"]["balanced"] else 1


def _cmd_report(args) -> int:
    rdir = Path(args.dir) / "reports"
    reports = sorted(rdir.glob("balance_report_*.txt")) if rdir.is_dir() else []
    if not reports:
        print(f"no balance reports under {rdir}", file=sys.stderr)
        return 1
    sys.stdout.write(reports[-1].read_text(encoding="utf-8"))
    return 0


def _cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    print(f"ok: {sc.name} ({len(sc.policies)} policies, {len(sc.trainers)} trainers, "
          f"{len(sc.raas)} RaaS instances, {sc.run_versions} versions)")
    return 0


def _cmd_presets(args) -> int:
    for name in list_presets():
        print(f"preset:{name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rlflow", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write metrics, reports and summary.json")
    r.add_argument("scenario", help="scenario file, or preset:<name>")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--mode", choices=("sim", "live"), default="sim")
    r.add_argument("--versions", type=int, default=None, help="override run length")
    r.add_argument("--time-scale", type=float, default=1e-3, help="live mode: real seconds per simulated second")
    r.add_argument("--timeout", type=float, default=300.0, help="live mode: wall-clock limit in seconds")
    r.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", help="print the last balance report of a run directory")
    p.add_argument("dir")
    p.set_defaults(fn=_cmd_report)

    v = sub.add_parser("validate", help="parse and validate a scenario")
    v.add_argument("scenario")
    v.set_defaults(fn=_cmd_validate)

    ls = sub.add_parser("presets", help="list bundled scenario presets")
    ls.set_defaults(fn=_cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except RLFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
