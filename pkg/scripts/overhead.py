#!/usr/bin/env python3
"""Mean number of fed-back path components against LOS probability and energy threshold."""
import argparse

import numpy as np

from egcsi.alignment import CodebookConfig
from egcsi.channel import EnvironmentSpec, SystemConfig, generate_dataset
from egcsi.pipeline import decouple_and_align


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg, cb = SystemConfig(), CodebookConfig()
    etas = (0.9, 0.99, 0.999)
    print("los_prob " + " ".join(f"eta={e:<6g}" for e in etas))
    for p in (0.0, 0.25, 0.5, 0.75, 1.0):
        H = generate_dataset(EnvironmentSpec(f"los{p:g}", los_probability=p), args.samples, cfg,
                             seed=args.seed).channels
        means = [np.mean(decouple_and_align(H, e, cb, cfg).r_hat) for e in etas]
        print(f"{p:8.2f} " + " ".join(f"{m:10.3f}" for m in means))


if __name__ == "__main__":
    main()
