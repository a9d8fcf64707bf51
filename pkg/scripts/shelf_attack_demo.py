"""Compare PGD with many restarts against the interval attack on the shelf net.

The shelf net misclassifies only a sliver next to the domain edge, which the
PGD gradient points away from; symbolic bounds over a region touching the
sliver reveal it.
"""
import argparse

from verirobust.attack import AttackConfig, attack_success_rate
from verirobust.fixtures import shelf_network

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--restarts", type=int, default=1000)
    ap.add_argument("--width", type=float, default=1e-6, help="width of the violating sliver")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    fx = shelf_network(a.width)
    common = dict(epsilon=fx.eps, pgd_steps=40, pgd_step=fx.eps / 10, seed=a.seed)
    for kind, restarts in (("pgd", a.restarts), ("interval", 1)):
        rate, outs = attack_success_rate(fx.net, fx.x[None], [fx.y],
                                         AttackConfig(kind=kind, restarts=restarts, **common))
        o = outs[0]
        where = "" if not o.success else f" at x={float(o.x_adv[0]):.7f}"
        print(f"{kind:8s} restarts={restarts:5d} success={rate:.0%}{where}")
