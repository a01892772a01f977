"""Command-line entry point: ``krecycle {solve,generate,compare}``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .flow import FractionalStepDriver
from .harness import build_source, format_summary, load_config, run_comparison
from .problems import SystemSequence, save_sequence


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="krecycle", description="Recycling Krylov solvers for sequences of linear systems.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (
        ("solve", "solve the configured sequence with the first configured solver"),
        ("generate", "write the configured sequence (matrix and right-hand sides) to a directory"),
        ("compare", "run every configured solver and write CSV reports"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--mode", choices=("independent", "shared_rhs"), help="comparison mode")
    return ap


def _generate(cfg) -> int:
    src = build_source(cfg)
    if isinstance(src, FractionalStepDriver):
        rhs = list(src.stream())
        p = src.params
        meta = {"generator": "fractional_step", "geometry": p.geometry, "seed": p.seed,
                "dt": p.dt, "nu": p.nu, "forcing": p.forcing}
        src = SystemSequence(src.A, rhs, meta=meta)
    out = cfg.out_dir or Path("sequence")
    save_sequence(src, out)
    print(f"wrote {len(src)} systems (N={src.A.N}) to {out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, mode=args.mode, out=str(args.out) if args.out else None)
    if args.command == "generate":
        return _generate(cfg)
    if args.command == "solve":
        cfg = replace(cfg, solvers=cfg.solvers[:1])
    results = run_comparison(cfg)
    print(format_summary(results))
    if cfg.out_dir is not None:
        print(f"reports written to {cfg.out_dir}")
    return 0 if all(r.all_converged for r in results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
