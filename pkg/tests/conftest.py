import numpy as np
import pytest

from noisyproto.dataio import FeatureSet


def random_class(rng, d=8, n=12, k=2, class_id=0):
    return FeatureSet(rng.normal(size=(d, n)), k, class_id)


def random_scores(rng, fs):
    """Scores in (0,1) with clean entries at 1."""
    r = rng.uniform(0.01, 0.99, size=fs.N)
    r[: fs.k] = 1.0
    return r


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
