import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("signforge", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("signforge")


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic train/test pair (4 classes) shared by the fast tests."""
    from signforge.dataio import generate_synthetic

    return generate_synthetic(num_classes=4, per_class=30, seed=7)


@pytest.fixture(scope="session")
def tiny_substitute(tiny_data):
    from signforge.models import AdversarialCNN

    train, _ = tiny_data
    return AdversarialCNN(width=0.25, epochs=3, batch_size=16, learning_rate=0.03, random_state=0).fit(train.X, train.y)


DESK_SEED = 0


def _desk_run(root):
    from signforge.cli import EXIT_OK, main

    assert main(["run", "--seed", str(DESK_SEED), "--out", str(root)]) == EXIT_OK
    return root


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full default pipeline (8 synthetic classes) at the fixed seed; a few minutes."""
    return _desk_run(tmp_path_factory.mktemp("desk") / "run")


@pytest.fixture(scope="session")
def desk_rerun(tmp_path_factory, desk_run):
    return _desk_run(tmp_path_factory.mktemp("desk-again") / "run")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance criteria register their outcome here; one line each is printed at the end

ACCEPTANCE = pytest.StashKey[dict]()
ACCEPTANCE_COUNT = 9


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance_results(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        status, title, detail = results.get(n, ("NOT RUN", "", ""))
        terminalreporter.write_line(f"criterion {n}: {status:<4} {title} {detail}".rstrip())
