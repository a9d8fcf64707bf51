import numpy as np
import pytest

from verirobust.analysis import Box
from verirobust.attack import AttackConfig, attack_success_rate, pgd
from verirobust.data_io import Dataset
from verirobust.fixtures import comb_network, hard_network
from verirobust.model import F32, Network, forward
from verirobust.numerics import make_rng
from verirobust.verify import (COUNTEREXAMPLE, MISCLASSIFIED, UNDECIDED, VERIFIED, RobustnessSpec,
                               choose_split, metrics, parallel_verify, verify_input)

from conftest import random_net


def grid_oracle(net, x, y, eps, n_side=1000):
    """Exhaustive grid plus corners over B_eps(x) for a 2-input net; True if a violation is seen."""
    lo = np.maximum(x.astype(np.float64) - eps, 0)
    hi = np.minimum(x.astype(np.float64) + eps, 1)
    a = np.linspace(lo[0], hi[0], n_side)
    bad = False
    for row in np.array_split(np.arange(n_side), 10):
        g = np.stack(np.meshgrid(a[row], np.linspace(lo[1], hi[1], n_side), indexing="ij"), -1)
        pts = g.reshape(-1, 2).astype(F32)
        pts = np.clip(pts, lo.astype(F32), hi.astype(F32))
        bad |= bool(np.any(np.argmax(forward(net, pts), axis=1) != y))
    corners = np.array([[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]], F32)
    return bad or bool(np.any(np.argmax(forward(net, corners), axis=1) != y))


def test_spec_validation():
    with pytest.raises(ValueError):
        RobustnessSpec(-0.1)
    with pytest.raises(ValueError):
        RobustnessSpec(0.1, max_depth=-1)
    with pytest.raises(ValueError):
        RobustnessSpec(0.1, workers=0)


def test_choose_split_rules():
    assert choose_split(np.array([3.0]), Box([0.0], [1.0])) == 0
    assert choose_split(np.array([0.0, 5.0]), Box([0, 0], [1, 1])) == 1
    assert choose_split(np.array([2.0, 2.0]), Box([0, 0], [1, 1])) == 0
    assert choose_split(np.zeros(3), Box([0, 0, 0], [1, 3, 2])) == 1
    assert choose_split(np.array([1.0, 1.0]), Box([0, 0], [1, 2])) == 1


def test_zero_eps_verified_iff_correct():
    rng = make_rng(0)
    for _ in range(30):
        net = random_net(rng)
        x = rng.random(net.input_dim).astype(F32)
        y = int(rng.integers(0, net.num_classes))
        v = verify_input(net, x, y, RobustnessSpec(0.0, timeout=None))
        correct = int(np.argmax(forward(net, x))) == y
        assert (v.verdict == VERIFIED) == correct
        assert v.verdict in (VERIFIED, MISCLASSIFIED)


def test_hard_fixture_needs_bisection():
    net, x, y, eps = hard_network()
    assert verify_input(net, x, y, RobustnessSpec(eps, max_depth=0, timeout=None)).verdict == UNDECIDED
    assert verify_input(net, x, y, RobustnessSpec(eps, max_depth=1, timeout=None)).verdict == UNDECIDED
    v = verify_input(net, x, y, RobustnessSpec(eps, max_depth=20, timeout=None))
    assert v.verdict == VERIFIED and v.nodes >= 5


def test_node_budget_gives_undecided():
    net = comb_network(2, (0.2, 0.4, 0.6, 0.8), scale=8)
    x = np.array([0.5, 0.5], F32)
    v = verify_input(net, x, 0, RobustnessSpec(0.5, timeout=None, max_nodes=10))
    assert v.verdict == UNDECIDED and v.nodes == 10


def test_counterexamples_are_confirmed():
    rng = make_rng(3)
    found = 0
    for _ in range(40):
        net = random_net(rng, n_in=3, n_layers=3, width=8)
        x = rng.random(3).astype(F32)
        y = int(np.argmax(forward(net, x)))
        v = verify_input(net, x, y, RobustnessSpec(0.2, max_depth=6, timeout=None))
        if v.verdict == COUNTEREXAMPLE:
            found += 1
            assert np.argmax(forward(net, v.counterexample)) != y
            assert np.all(np.abs(v.counterexample.astype(np.float64) - x) <= 0.2)
    assert found > 0


def two_input_cases(n_nets, seed=0):
    rng = make_rng(seed)
    for _ in range(n_nets):
        net = random_net(rng, n_in=2, n_layers=3, width=int(rng.integers(4, 17)),
                         n_out=int(rng.integers(2, 4)))
        x = rng.uniform(0.1, 0.9, 2).astype(F32)
        yield net, x, int(np.argmax(forward(net, x))), float(rng.uniform(0.01, 0.15))


@pytest.mark.slow
def test_grid_oracle_agreement():
    contradictions = 0
    for net, x, y, eps in two_input_cases(20, seed=1):
        report = parallel_verify(net, (x[None], [y]), RobustnessSpec(eps, max_depth=14, timeout=None))
        v = report.verdicts[0]
        if v.verdict == VERIFIED:
            contradictions += grid_oracle(net, x, y, eps)
        elif v.verdict == COUNTEREXAMPLE:
            contradictions += int(np.argmax(forward(net, v.counterexample)) == y)
    assert contradictions == 0


def test_workers_do_not_change_verdicts():
    rng = make_rng(5)
    net = comb_network(2, (0.2, 0.45, 0.7), scale=6, margin=0.3)
    X = rng.uniform(0.2, 0.8, (12, 2)).astype(F32)
    Y = np.zeros(12, int)
    Y[::5] = 1                                         # some misclassified inputs too
    spec = RobustnessSpec(0.25, max_depth=12, timeout=None)
    seq = [verify_input(net, x, y, spec, i) for i, (x, y) in enumerate(zip(X, Y))]
    one = parallel_verify(net, (X, Y), spec)
    assert [v.verdict for v in seq] == one.verdict_column()
    assert [v.nodes for v in seq] == [v.nodes for v in one.verdicts]
    for w in (2, 3):
        many = parallel_verify(net, (X, Y), RobustnessSpec(0.25, max_depth=12, timeout=None, workers=w))
        assert many.verdict_column() == one.verdict_column()


def test_parallel_counterexamples_confirmed():
    rng = make_rng(7)
    net = random_net(rng, n_in=2, n_layers=3, width=12)
    X = rng.random((10, 2)).astype(F32)
    Y = np.argmax(forward(net, X), axis=1)
    spec = RobustnessSpec(0.2, max_depth=8, timeout=None, workers=2)
    rep = parallel_verify(net, (X, Y), spec)
    seq = parallel_verify(net, (X, Y), RobustnessSpec(0.2, max_depth=8, timeout=None))
    assert rep.verdict_column() == seq.verdict_column()
    for v in rep.verdicts:
        if v.verdict == COUNTEREXAMPLE:
            assert np.argmax(forward(net, v.counterexample)) != Y[v.index]


def test_verified_inputs_resist_attacks():
    rng = make_rng(8)
    for net, x, y, eps in two_input_cases(8, seed=2):
        v = verify_input(net, x, y, RobustnessSpec(eps, max_depth=10, timeout=None))
        if v.verdict != VERIFIED:
            continue
        for kind in ("fgsm", "pgd", "interval"):
            cfg = AttackConfig(kind=kind, epsilon=eps, restarts=50, pgd_step=eps / 8)
            rate, _ = attack_success_rate(net, x[None], [y], cfg)
            assert rate == 0.0


def test_metrics_ordering_and_summary(moons):
    _, te = moons
    rng = make_rng(9)
    for _ in range(3):
        net = random_net(rng, n_in=2, n_layers=3, width=16, n_out=2)
        for eps in (0.0, 0.02, 0.1):
            rep = metrics(net, te, eps, spec=RobustnessSpec(eps, te.domain, max_depth=4, timeout=None))
            assert rep.vra <= rep.era <= rep.acc
            if eps == 0:
                assert rep.vra == rep.acc
    line = rep.summary_line()
    assert line.startswith("ACC=") and ",ERA=" in line and ",VRA=" in line


def test_constant_net_all_metrics_equal():
    net = Network([np.zeros((2, 2))], [np.array([1.0, 0.0])])
    ds = Dataset(make_rng(0).random((20, 2)), np.zeros(20, int), 2)
    rep = metrics(net, ds, 0.3, spec=RobustnessSpec(0.3, timeout=None))
    assert rep.acc == rep.era == rep.vra == 1.0


def test_random_labels_accuracy_near_chance():
    rng = make_rng(10)
    n, k = 600, 4
    ds = Dataset(rng.random((n, 3)), rng.integers(0, k, n), k)
    net = random_net(rng, n_in=3, n_out=k)
    rep = metrics(net, ds, 0.0, spec=RobustnessSpec(0.0, timeout=None), era=False)
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(rep.acc - 1 / k) <= 3 * sigma


def test_empty_dataset_rejected():
    net = Network.init([2, 2])
    with pytest.raises(ValueError):
        metrics(net, Dataset(np.zeros((0, 2)), np.zeros(0, int), 2), 0.1)


def test_report_csv(tmp_path):
    net, x, y, eps = hard_network()
    rep = parallel_verify(net, (np.stack([x, x]), [0, 1]), RobustnessSpec(eps, timeout=None))
    rep.write_verdicts(tmp_path / "v.csv")
    rep.write_timings(tmp_path / "t.csv")
    assert (tmp_path / "v.csv").read_text().splitlines() == ["index,verdict", "0,verified",
                                                           "1,misclassified"]
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "index,verdict,nodes,millis"


def test_split_rule_diagnostic(capsys):
    """Child looseness under the width * |g_I| split against the widest-dimension split.

    Looseness of a split is the larger verifiable robust loss of its two
    children.  Logged only; no assertion.
    """
    from verirobust.analysis import interval_gradient, verifiable_robust_loss

    rng = make_rng(12)
    not_looser = total = 0
    for _ in range(60):
        net = random_net(rng, n_in=4, n_layers=3, width=16)
        x = rng.random(4).astype(F32)
        y = int(np.argmax(forward(net, x)))
        box = Box.around(x, float(rng.uniform(0.05, 0.3)))
        box = Box(box.lo, box.lo + (box.hi - box.lo) * rng.uniform(0.3, 1.0, 4))
        chosen = choose_split(interval_gradient(net, box, y), box)
        widest = int(np.argmax(box.width))
        if chosen == widest:
            continue

        def looseness(dim):
            return max(verifiable_robust_loss(net, b, y) for b in box.split(dim))

        not_looser += looseness(chosen) <= looseness(widest)
        total += 1
    with capsys.disabled():
        print(f"\nsplit rule: width*|g_I| children no looser than widest-dim in "
              f"{not_looser}/{total} differing nodes")
