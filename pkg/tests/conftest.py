import numpy as np
import pytest

from bevseg.grid import GridSpec
from bevseg.scenes import CorruptionPreset, SceneSpec, write_dataset


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance scorecard (if any ran) after the test summary."""
    import _scorecard
    if _scorecard.LINES:
        terminalreporter.section("acceptance scorecard")
        for line in _scorecard.LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_grid():
    """Small grid with a 100 m extent so the standard distance bands apply."""
    return GridSpec(cells_per_side=50, resolution=2.0)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory, toy_grid):
    """Tiny train/val dataset shared by the training-loop tests."""
    root = tmp_path_factory.mktemp("data") / "toy"
    rain = CorruptionPreset.rain()
    specs = [SceneSpec(seed=2 * i, grid=toy_grid, corruption=rain) for i in range(8)]
    specs += [SceneSpec(seed=2 * i + 1, grid=toy_grid, corruption=rain) for i in range(4)]
    write_dataset(specs, root, input_side=32)
    return root
