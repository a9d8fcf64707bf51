import hashlib

import numpy as np
import pytest

from verirobust.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, main, read_manifest
from verirobust.fixtures import hard_network, shelf_network
from verirobust.model import Network, save

MOONS = "moons:n=300,noise=0.1,seed=0"


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def train(out, *extra):
    return main(["train", "--data", MOONS, "--out", str(out), "--epochs", "2",
                 "--batch-size", "20", "--epsilon", "0.05", "--warmup-epochs", "1",
                 "--hidden", "16,16", *extra])


def test_train_writes_model_and_manifest(tmp_path, capsys):
    assert train(tmp_path, "--k", "30") == EXIT_OK
    assert (tmp_path / "model.vrnn").exists()
    m = read_manifest(tmp_path / "manifest.txt")
    assert m["k_prime"] == "2"
    assert m["arg.scheme"] == "mixtrain" and m["status"] == "ok"
    assert "k_prime=2" in capsys.readouterr().out
    rows = (tmp_path / "epochs.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,epsilon,alpha") and len(rows) == 3


def test_zero_epochs_returns_initial_model(tmp_path):
    assert train(tmp_path, "--epochs", "0") == EXIT_OK
    assert (tmp_path / "model.vrnn").exists()
    assert len((tmp_path / "epochs.csv").read_text().splitlines()) == 1


def test_manifest_rerun_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert train(a, "--seed", "3") == EXIT_OK
    assert main(["train", "--manifest", str(a / "manifest.txt"), "--out", str(b)]) == EXIT_OK
    assert digest(a / "model.vrnn") == digest(b / "model.vrnn")


def test_manifest_flags_can_be_overridden(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert train(a) == EXIT_OK
    assert main(["train", "--manifest", str(a / "manifest.txt"), "--out", str(b),
                 "--seed", "9"]) == EXIT_OK
    assert read_manifest(b / "manifest.txt")["arg.seed"] == "9"
    assert digest(a / "model.vrnn") != digest(b / "model.vrnn")


@pytest.mark.parametrize("scheme", ["regular", "adv", "verifiable"])
def test_mixtrain_flags_rejected_for_other_schemes(tmp_path, scheme):
    assert train(tmp_path, "--scheme", scheme, "--k", "5") == EXIT_USAGE


def test_usage_errors(tmp_path):
    assert train(tmp_path, "--batch-size", "1000") == EXIT_USAGE
    assert main(["train", "--data", "nope:1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    code = train(tmp_path, "--scheme", "regular", "--optimizer", "sgd", "--lr", "1e35")
    assert code == EXIT_DIVERGED
    assert read_manifest(tmp_path / "manifest.txt")["status"].startswith("diverged")


def test_io_errors(tmp_path):
    assert main(["verify", "--model", str(tmp_path / "missing.vrnn"), "--data", MOONS,
                 "--out", str(tmp_path)]) == EXIT_IO
    bad = tmp_path / "bad.vrnn"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--model", str(bad), "--data", MOONS, "--out", str(tmp_path)]) == EXIT_IO
    assert main(["eval", "--model", str(bad), "--data", f"idx:{bad},{bad}",
                 "--out", str(tmp_path)]) == EXIT_IO


@pytest.fixture
def perfect(tmp_path):
    """Constant net that predicts class 0 on a dataset labelled all 0."""
    net = Network([np.zeros((2, 2))], [np.array([1.0, 0.0])])
    save(net, tmp_path / "const.vrnn")
    rows = ["x0,x1,y"] + [f"{a:.3f},{b:.3f},0" for a, b in np.random.default_rng(0).random((20, 2))]
    (tmp_path / "zero.csv").write_text("\n".join(rows) + "\n")
    return tmp_path / "const.vrnn", f"csv:{tmp_path / 'zero.csv'}"


def rate_of(out):
    return float(read_manifest(out / "manifest.txt")["rate"])


def test_attack_zero_eps_on_perfect_net(tmp_path, perfect):
    model, data = perfect
    for kind in ("fgsm", "pgd", "interval"):
        out = tmp_path / kind
        assert main(["attack", "--model", str(model), "--data", data, "--attack", kind,
                     "--epsilon", "0", "--out", str(out)]) == EXIT_OK
        assert rate_of(out) == 0.0


def test_attack_interval_beats_pgd_on_shelf(tmp_path):
    fx = shelf_network()
    save(fx.net, tmp_path / "shelf.vrnn")
    (tmp_path / "shelf.csv").write_text(f"x,y\n{float(fx.x[0])!r},{fx.y}\n")
    common = ["--model", str(tmp_path / "shelf.vrnn"), "--data", f"csv:{tmp_path / 'shelf.csv'}",
              "--epsilon", str(fx.eps), "--restarts", "100", "--pgd-step", "0.02"]
    assert main(["attack", *common, "--attack", "pgd", "--out", str(tmp_path / "p")]) == EXIT_OK
    assert main(["attack", *common, "--attack", "interval", "--out", str(tmp_path / "i")]) == EXIT_OK
    assert rate_of(tmp_path / "i") > rate_of(tmp_path / "p")


def test_attack_csv_is_deterministic(tmp_path):
    assert train(tmp_path / "m", "--scheme", "regular") == EXIT_OK
    args = ["attack", "--model", str(tmp_path / "m" / "model.vrnn"), "--data", MOONS,
            "--limit", "40", "--epsilon", "0.1", "--restarts", "2", "--pgd-steps", "10"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert digest(tmp_path / "a" / "attack.csv") == digest(tmp_path / "b" / "attack.csv")
    assert (tmp_path / "a" / "attack.csv").read_text().startswith("index,success,loss,iters\n")


def test_verify_threads_give_identical_verdicts(tmp_path):
    assert train(tmp_path / "m", "--k", "60") == EXIT_OK
    base = ["verify", "--model", str(tmp_path / "m" / "model.vrnn"), "--data", MOONS,
            "--limit", "30", "--epsilon", "0.05", "--timeout-ms", "0", "--max-depth", "8"]
    for t in ("1", "4"):
        assert main(base + ["--threads", t, "--out", str(tmp_path / t)]) == EXIT_OK
    assert digest(tmp_path / "1" / "verdicts.csv") == digest(tmp_path / "4" / "verdicts.csv")
    assert (tmp_path / "1" / "summary.txt").read_text() == (tmp_path / "4" / "summary.txt").read_text()


def test_verify_zero_eps_vra_equals_acc(tmp_path):
    assert train(tmp_path / "m", "--scheme", "regular") == EXIT_OK
    out = tmp_path / "v"
    assert main(["verify", "--model", str(tmp_path / "m" / "model.vrnn"), "--data", MOONS,
                 "--limit", "50", "--epsilon", "0", "--out", str(out)]) == EXIT_OK
    fields = dict(kv.split("=") for kv in (out / "summary.txt").read_text().strip().split(","))
    assert fields["VRA"] == fields["ACC"] == fields["ERA"]


def test_verify_depth_zero_undecided_on_hard_fixture(tmp_path):
    net, x, y, eps = hard_network()
    save(net, tmp_path / "hard.vrnn")
    (tmp_path / "hard.csv").write_text(f"x,y\n{float(x[0])!r},{y}\n")
    args = ["verify", "--model", str(tmp_path / "hard.vrnn"), "--data", f"csv:{tmp_path / 'hard.csv'}",
            "--epsilon", str(eps), "--timeout-ms", "0", "--no-era"]
    assert main(args + ["--max-depth", "0", "--out", str(tmp_path / "d0")]) == EXIT_OK
    assert (tmp_path / "d0" / "verdicts.csv").read_text().splitlines()[1] == "0,undecided"
    assert main(args + ["--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "verdicts.csv").read_text().splitlines()[1] == "0,verified"


def test_eval_prints_summary(tmp_path, capsys):
    assert train(tmp_path / "m") == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--model", str(tmp_path / "m" / "model.vrnn"), "--data", MOONS,
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ACC=")
