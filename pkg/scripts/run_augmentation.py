"""Compare Model A trained with and without circular-shift augmentation on
plain and T/2-shifted test volumes.

    python3 scripts/run_augmentation.py --seeds 0
"""

import argparse
import logging

import numpy as np

from conv4dnet.experiments import OrderingSetup, run_augmentation
from conv4dnet.io import write_rows_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=OrderingSetup.epochs)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = OrderingSetup(seeds=tuple(int(s) for s in args.seeds.split(",")), epochs=args.epochs)
    rows = run_augmentation(setup, progress=print)
    for aug in (True, False):
        drop = np.mean([r["drop"] for r in rows if r["augment"] == aug])
        print(f"augment={aug}: mean drop under T/2 shift {drop:+.3f}")
    if args.out:
        write_rows_csv(args.out, rows)


if __name__ == "__main__":
    main()
