"""Command-line entry point: ``msat sweep | debt-hist | verify | show-config``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from typing import Dict, List, Optional

from .config import PRESETS, ExperimentConfig, dump_config, load_config

UNITS = ("Units: transition rates lambda and mu in 1/ms, slot length T in ms, payload c in bits per "
         "successful slot; effective bandwidth and throughput in bits per slot.")


def _parse_sets(items: List[str]) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file with [channel], [effective_bandwidth], "
                        "[experiment], [estimator] and [output] sections")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--horizon", type=int, help="slots per replication")
    common.add_argument("--replications", type=int, help="independent replications per point")
    common.add_argument("--workers", type=int, help="worker processes for sweep points")
    common.add_argument("--gammas", help="comma separated collision levels")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override any config key, e.g. --set channel.lambda=0.5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msat", description="Myopic sensing with adaptive transmission: "
                                "closed forms, simulation and verification.", epilog=UNITS)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("sweep", parents=[common], help="closed forms and simulation over the gamma grid",
                   epilog=UNITS)
    sub.add_parser("debt-hist", parents=[common], help="centered debt histogram of MS-AT and MS-MT",
                   epilog=UNITS)
    v = sub.add_parser("verify", parents=[common], help="run the verification suite", epilog=UNITS)
    v.add_argument("--inject-fault", action="store_true",
                   help="flip the AT comparison to <= (negative control, must fail)")
    v.add_argument("--skip", action="append", default=[], metavar="CHECK",
                   help="skip a check group (interval-bounds, coupling, feasibility, dp-myopic, spectral, "
                        "supremum-bound)")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration", epilog=UNITS)
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = _parse_sets(args.set)
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("horizon", "horizon"),
                      ("replications", "replications"), ("workers", "workers"), ("gammas", "gammas")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = str(val)
    return load_config(args.config, args.preset, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return 0

    from . import experiments

    start = time.time()
    if args.command == "sweep":
        res = experiments.run_sweep(cfg, cfg.out_dir)
        for p in res.points:
            if p.error:
                print(f"gamma={p.gamma:g}: FAILED {p.error}")
            else:
                print(f"gamma={p.gamma:g} tau={p.tau:.5g} EB*={p.eb_closed:.5f} EB_sim={p.eb_sim:.5f} "
                      f"TH*={p.th_closed:.5f} TH_sim={p.th_sim:.5f} Cmax={p.collision_max:.5f}")
        print(f"wrote {os.path.join(cfg.out_dir, 'summary.csv')} ({time.time() - start:.1f}s)")
        return 1 if res.failures else 0

    if args.command == "debt-hist":
        hists = experiments.run_debt_histogram(cfg, cfg.out_dir)
        for h in hists:
            print(f"gamma={h.gamma:g} {h.policy}: A_(t+1) - tau t in [{h.centered_min:.3f}, {h.centered_max:.3f}]")
        print(f"wrote {os.path.join(cfg.out_dir, 'debt_hist.csv')} ({time.time() - start:.1f}s)")
        return 0

    report = experiments.run_verifications(cfg, cfg.out_dir, inject_fault=args.inject_fault, skip=args.skip)
    for line in report.lines():
        print(line)
    print(f"{'all checks passed' if report.ok else 'VERIFICATION FAILED'} ({time.time() - start:.1f}s)")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
