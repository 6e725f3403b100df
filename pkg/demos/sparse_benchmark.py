"""Time fast sparse coding against OMP on a 576 x 512 dictionary with K = 6.

    python3 demos/sparse_benchmark.py [--n 1000,10000]
"""

import argparse
import csv
import tempfile
from pathlib import Path

from sscontour import cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", default="1000,10000")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "bench.csv"
        cli.main(["bench-sparse", "--n", args.n, "--out", str(out), "--threads", "1"])
        rows = list(csv.DictReader(open(out)))
    by_n = {}
    for r in rows:
        by_n.setdefault(r["n_targets"], {})[r["solver"]] = float(r["seconds"])
    for n, t in by_n.items():
        print(f"n={n:>7s}  fast {t['fast']:.3f} s  omp {t['omp']:.3f} s  speed-up {t['omp'] / t['fast']:.1f}x")


if __name__ == "__main__":
    main()
