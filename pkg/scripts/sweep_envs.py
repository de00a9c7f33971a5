#!/usr/bin/env python3
"""Unseen-environment NMSE against the number of training environments.

    python3 scripts/sweep_envs.py --config scripts/configs/envs.json --grid 1,2,3,4,5
"""
import argparse
import logging
import os
from dataclasses import replace

from egcsi.harness import load_config, sweep_train_envs, write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--grid", default="1,2,3,4,5", help="training-environment counts")
    ap.add_argument("--out-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    os.makedirs(cfg.output_dir, exist_ok=True)
    table = sweep_train_envs(cfg, [int(v) for v in args.grid.split(",")])
    for scheme in ("eg", "vanilla"):
        print(scheme)
        for r in sorted(table.select(scheme, seed="mean"), key=lambda r: r.n_train_envs):
            print(f"  {r.n_train_envs} train envs: {r.nmse_db_mean:8.3f} dB (std {r.nmse_db_std:.3f}), "
                  f"{r.mean_bits:.1f} bits")
    print("wrote", *write_table(table, os.path.join(cfg.output_dir, f"{cfg.name}-sweep-envs")))


if __name__ == "__main__":
    main()
