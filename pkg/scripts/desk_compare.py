"""FAT vs Base on one prepared cache, averaged over seeds.

    python scripts/desk_compare.py CACHE [--d 32] [--epochs 6] [--seeds 0,1,2] [--out compare.csv]
"""
import argparse
import csv
import time

import numpy as np

from fatrec.data import read_cache
from fatrec.evaluation import compare_variants


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("cache")
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--T", type=int, default=6)
    ap.add_argument("--K", type=int, default=1)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="compare.csv")
    a = ap.parse_args()
    split = read_cache(a.cache)
    t0 = time.time()

    def echo(variant, seed, rep):
        vals = " ".join(f"{m}@{n}={v:.3f}" for (m, n), v in sorted(rep.values.items()))
        print(f"{variant} seed={seed} {time.time() - t0:.0f}s {vals}", flush=True)

    res = compare_variants(split, [int(s) for s in a.seeds.split(",")], echo=echo, d=a.d,
                           epochs=a.epochs, T=a.T, K=a.K)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "N", "fat", "base", "fat_minus_base"])
        for key in sorted(res["fat"]):
            f, b = np.mean(res["fat"][key]), np.mean(res["base"][key])
            w.writerow([key[0], key[1], f"{f:.4f}", f"{b:.4f}", f"{f - b:+.4f}"])
            print(f"{key[0]}@{key[1]}\tfat={f:.4f}\tbase={b:.4f}\t{f - b:+.4f}")


if __name__ == "__main__":
    main()
