#!/usr/bin/env python3
"""NMSE against feedback bits: one EG codeword length per grid point, vanilla matched to each.

    python3 scripts/sweep_bits.py --config scripts/configs/bits.json --grid 2,4,8,16,32
"""
import argparse
import logging
import os
from dataclasses import replace

from egcsi.harness import load_config, sweep_bits, write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--grid", default="2,4,8,16,32", help="EG codeword lengths M")
    ap.add_argument("--out-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    os.makedirs(cfg.output_dir, exist_ok=True)
    table = sweep_bits(cfg, [int(v) for v in args.grid.split(",")])
    print(f"{'scheme':8s} {'point':18s} {'bits':>8s} {'NMSE dB':>9s} {'std':>6s}")
    for r in sorted(table.summary, key=lambda r: (r.scheme, r.mean_bits)):
        print(f"{r.scheme:8s} {r.point:18s} {r.mean_bits:8.1f} {r.nmse_db_mean:9.3f} {r.nmse_db_std:6.3f}")
    print("wrote", *write_table(table, os.path.join(cfg.output_dir, f"{cfg.name}-sweep-bits")))


if __name__ == "__main__":
    main()
