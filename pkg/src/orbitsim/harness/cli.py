"""Command line entry point: ``orbitsim run`` and ``orbitsim sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import yaml

from .config import ConfigError, ExperimentConfig, load
from .experiment import run_experiment, sweep, write_outputs


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.duration is not None:
        changes["sim.duration_s"] = args.duration
    if args.out is not None:
        changes["output"] = args.out
    if getattr(args, "saturate", False):
        changes["saturate"] = True
    return cfg.replace(**changes) if changes else cfg


def _parse_values(text: str) -> list:
    return [yaml.safe_load(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orbitsim", description="Recirculating in-network cache simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--duration", type=float, help="simulated seconds")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--saturate", action="store_true", help="search the saturation load")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    sw = sub.add_parser("sweep", help="run one experiment per axis value")
    common(sw)
    sw.add_argument("--axis", required=True, help="dotted config field, e.g. cache.size")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--same-seed", action="store_true", help="reuse the base seed for every run")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_flags(load(args.config), args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = cfg.output or "out"

    if args.command == "run":
        rep = run_experiment(cfg)
        csv_path, _ = write_outputs([rep.row()], [rep], outdir, cfg.name)
        print(f"{cfg.name}: throughput {rep.throughput_rps:.0f} rps, efficiency "
              f"{rep.balancing_efficiency:.3f}, audit {'ok' if rep.audit_ok else 'FAILED'} -> {csv_path}")
        return 0 if rep.audit_ok else 1

    try:
        values = _parse_values(args.values)
        cfg.replace(**{args.axis: values[0]})
    except (KeyError, TypeError, ConfigError, IndexError) as exc:
        print(f"config error: bad axis {args.axis!r}: {exc}", file=sys.stderr)
        return 2
    results = sweep(cfg, args.axis, values, same_seed=args.same_seed)
    rows = [r["row"] for r in results]
    reports = [r["report"] for r in results]
    name = f"{cfg.name}_{args.axis.replace('.', '_')}"
    csv_path, _ = write_outputs(rows, reports, outdir, name)
    failed = [r for r in rows if "error" in r or not r.get("audit_ok", False)]
    for r in rows:
        status = r.get("error") or ("ok" if r["audit_ok"] else "audit FAILED")
        print(f"{args.axis}={r['value']}: {r.get('throughput_rps', '-')} rps [{status}]")
    print(f"-> {csv_path}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
