"""Time the bisection verifier on the deep-tree comb-net benchmark per worker count."""
import argparse
import os

from verirobust.experiments import deep_tree_benchmark

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workers", default="1,4,8")
    ap.add_argument("--inputs", type=int, default=8)
    a = ap.parse_args()

    res = deep_tree_benchmark(tuple(int(w) for w in a.workers.split(",")), n=a.inputs)
    base = next(iter(res.values()))
    print(f"cpus={os.cpu_count()} nodes={base['nodes']}")
    for w, r in res.items():
        same = r["verdicts"] == base["verdicts"]
        print(f"workers={w:2d} wall={r['wall']:.2f}s speedup={base['wall'] / r['wall']:.2f}x "
              f"verdicts_match={same}")
