"""Write the desk-scale MNIST split (2,000 train / 1,000 test) as IDX files.

Source: the 5,000-digit MNIST sample shipped with mlxtend (pip install mlxtend).
"""
import argparse

from verirobust.experiments import DESK_TEST, DESK_TRAIN, write_mnist_subset

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train", type=int, default=DESK_TRAIN)
    ap.add_argument("--test", type=int, default=DESK_TEST)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    path = write_mnist_subset(a.out, a.train, a.test, a.seed)
    print(f"wrote {a.train} train / {a.test} test digits to {path}")
