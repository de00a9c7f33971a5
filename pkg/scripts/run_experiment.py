#!/usr/bin/env python3
"""Run one EG-versus-vanilla experiment from a JSON config and write CSV/JSON results.

    python3 scripts/run_experiment.py --config scripts/configs/generalization.json
"""
import argparse
import logging
import os
from dataclasses import replace

from egcsi.harness import format_summary, load_config, run_experiment, write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--out-dir", help="overrides output_dir from the config")
    ap.add_argument("--seeds", help="comma-separated run seeds")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    if args.seeds:
        cfg = replace(cfg, seeds=[int(s) for s in args.seeds.split(",")])
    os.makedirs(cfg.output_dir, exist_ok=True)
    table = run_experiment(cfg)
    paths = write_table(table, os.path.join(cfg.output_dir, cfg.name))
    print(format_summary(table))
    for scheme in ("eg", "vanilla"):
        for r in table.select(scheme):
            if r.seed != "mean":
                print(f"seed {r.seed} {scheme:8s} {r.point:18s} bits {r.mean_bits:8.2f}  NMSE {r.nmse_db_mean:8.3f} dB")
    print("wrote", *paths)


if __name__ == "__main__":
    main()
