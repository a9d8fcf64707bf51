"""Train the desk-scale MNIST net with several schemes and report ACC/ERA/VRA.

Expects the IDX files written by fetch_mnist.py.
"""
import argparse
import csv
import logging

from verirobust.experiments import desk_config, desk_run, load_mnist_dir
from verirobust.train import SCHEMES

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/mnist")
    ap.add_argument("--schemes", default="regular,adversarial,mixtrain",
                    help=f"comma-separated subset of {','.join(SCHEMES)}")
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None, help="append one row per scheme here")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    tr, te = load_mnist_dir(a.data)
    rows = []
    for scheme in a.schemes.split(","):
        r = desk_run(tr, te, desk_config(scheme, eps=a.epsilon, epochs=a.epochs, seed=a.seed))
        rows.append([scheme, a.epsilon, a.seed, r.acc, r.era, r.vra, r.batch_time, r.train_seconds])
        print(f"{scheme:12s} ACC={100 * r.acc:.1f} ERA={100 * r.era:.1f} VRA={100 * r.vra:.1f} "
              f"batch={1e3 * r.batch_time:.2f}ms train={r.train_seconds:.0f}s")
    if a.csv:
        with open(a.csv, "a", newline="") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(["scheme", "epsilon", "seed", "acc", "era", "vra", "batch_time",
                            "train_seconds"])
            w.writerows(rows)
