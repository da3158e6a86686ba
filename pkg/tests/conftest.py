import time
from pathlib import Path

import numpy as np
import pytest

from reidattack.data import SyntheticSpec, generate_synthetic
from reidattack.model import ReIDVictim

DEFAULT_SEED = 7

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def bundle():
    return generate_synthetic(SyntheticSpec(seed=DEFAULT_SEED))


@pytest.fixture(scope="session")
def victim(bundle):
    return ReIDVictim(seed=DEFAULT_SEED).fit(bundle.images("train"), bundle.person_ids("train"))


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate_synthetic(SyntheticSpec(num_train_ids=3, num_test_ids=3, images_per_id=4,
                                            image_shape=(32, 16), seed=3))


@pytest.fixture(scope="session")
def tiny_victim(tiny_bundle):
    return ReIDVictim(epochs=2, seed=3).fit(tiny_bundle.images("train"),
                                            tiny_bundle.person_ids("train"))


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """Two independent CLI runs of the shipped default config with seed 7.

    Returns ``(first_dir, second_dir, seconds_for_first_run)``.
    """
    from reidattack.pipeline import cli_main

    cfg = str(Path(__file__).resolve().parents[1] / "default.cfg")
    dirs, elapsed = [], []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        start = time.perf_counter()
        code = cli_main(["run", "--config", cfg, "--seed", str(DEFAULT_SEED), "--output", str(out)])
        elapsed.append(time.perf_counter() - start)
        assert code == 0, f"default run exited with {code}"
        dirs.append(out)
    return dirs[0], dirs[1], elapsed[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}")
