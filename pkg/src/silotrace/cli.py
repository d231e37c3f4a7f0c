"""Command-line entry point: ``silotrace run|convert|psi-demo|heatmap``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .convert import convert_lines, dump_objects
from .errors import SchemaMismatch
from .psi import PsiMode, run_psi
from .simnet import run_scenario

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2


def _setup_logging() -> None:
    level = os.environ.get("SILOTRACE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    res = run_scenario(args.scenario, seed=args.seed, out_dir=args.out)
    if res.exit_status:
        print(f"error: {res.error}", file=sys.stderr)
        return res.exit_status
    w = res.world
    notes = len(w.log.of_kind("notification"))
    print(f"cycles={w.cycle} events={len(w.log.events)} notifications={notes} out={args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        salt = bytes.fromhex(args.salt)
        if len(salt) != 16:
            raise ValueError
    except ValueError:
        print("error: --salt must be 32 hex characters", file=sys.stderr)
        return EXIT_INVALID
    try:
        with open(args.input) as fh:
            objs = convert_lines(fh, salt)
    except SchemaMismatch as exc:
        print(f"error: SchemaMismatch: {exc}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(dump_objects(objs))
    return EXIT_OK


def _read_set(path) -> dict:
    items = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            items[hashlib.sha256(line.encode()).digest()] = line
    return items


def cmd_psi_demo(args) -> int:
    a, b = _read_set(args.a), _read_set(args.b)
    mode = PsiMode(args.mode)
    if not a:
        if mode is PsiMode.PSI_CA:
            print(0)
        return EXIT_OK
    res = run_psi(list(a), list(b), mode, seed=args.seed)
    if mode is PsiMode.PSI_CA:
        print(res.count)
    else:
        for line in sorted(a[e] for e in res.elements):
            print(line)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    path = Path(args.input) / "heatmap.csv"
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_INVALID
    places, totals = agg.read_heatmap_csv(path.read_text())
    try:
        hm = agg.heatmap(totals, args.threshold)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    index_map = agg.build_index_map([bytes.fromhex(p) for p in places]) if all(places) else None
    sys.stdout.write(hm.to_csv(index_map))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silotrace", description="Multi-source private contact tracing simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file (or bundled scenario name)")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("convert", help="convert JSON-lines source records to unified objects")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--salt", required=True)
    c.set_defaults(func=cmd_convert)

    d = sub.add_parser("psi-demo", help="PSI between two line-per-element files (A receives)")
    d.add_argument("--a", required=True)
    d.add_argument("--b", required=True)
    d.add_argument("--mode", choices=[m.value for m in PsiMode], default="psi")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_psi_demo)

    h = sub.add_parser("heatmap", help="re-threshold the heat map of a run output directory")
    h.add_argument("--in", dest="input", required=True)
    h.add_argument("--threshold", type=int, default=agg.DEFAULT_THRESHOLD)
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
