import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from verirobust.data_io import synth_blobs, synth_moons
from verirobust.model import Network

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_net(rng, n_in=None, n_layers=None, width=None, n_out=None, scale=1.0):
    """Random ReLU net with at most 4 layers and width 64."""
    n_in = n_in or int(rng.integers(1, 9))
    n_layers = n_layers or int(rng.integers(1, 5))
    sizes = [n_in]
    for _ in range(n_layers - 1):
        sizes.append(width or int(rng.integers(2, 65)))
    sizes.append(n_out or int(rng.integers(2, 6)))
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(scale * rng.standard_normal((b, a)) / np.sqrt(a))
        bs.append(0.3 * scale * rng.standard_normal(b))
    return Network(ws, bs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def moons():
    return synth_moons(600, 0.1, seed=0).split(400, 200, seed=0)


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(300, 3, 0.04, seed=0).split(200, 100, seed=0)


# Every metrics() report produced anywhere in the suite, for the ordering check.
# Patched at conftest import so test modules importing ``metrics`` by name
# pick up the recording wrapper.
METRIC_LOG: list[tuple[str, float, float | None, float]] = []


def _install_metric_recorder():
    import verirobust.cli
    import verirobust.experiments
    import verirobust.verify

    original = verirobust.verify.metrics

    def recording(*args, **kwargs):
        rep = original(*args, **kwargs)
        METRIC_LOG.append((_current_test[0], rep.acc, rep.era, rep.vra))
        return rep

    for m in (verirobust.verify, verirobust.cli, verirobust.experiments):
        m.metrics = recording


_install_metric_recorder()


_current_test = [""]


@pytest.fixture(autouse=True)
def _track_test(request):
    _current_test[0] = request.node.nodeid
    yield


def ordering_violations(log=None):
    """Recorded reports where VRA <= ERA <= ACC fails (ERA skipped when not computed)."""
    bad = []
    for name, acc, era, vra in (METRIC_LOG if log is None else log):
        upper = acc if era is None else era
        if not (vra <= upper <= acc):
            bad.append((name, acc, era, vra))
    return bad


def pytest_terminal_summary(terminalreporter):
    if METRIC_LOG:
        bad = ordering_violations()
        terminalreporter.write_line(
            f"{'PASS' if not bad else 'FAIL'} C5 suite-wide metric ordering: "
            f"{len(METRIC_LOG)} metrics() calls, {len(bad)} violations")
