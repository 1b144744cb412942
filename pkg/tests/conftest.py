import numpy as np
import pytest

from morarena.harness import ExperimentConfig, World

ARENA_SEEDS = (0, 1, 2, 3, 4)
_ACCEPTANCE = {}


class Arena:
    """Default-config worlds shared by every test in the session."""

    def __init__(self):
        self.cfg = ExperimentConfig()
        self._worlds = {}

    def world(self, seed):
        if seed not in self._worlds:
            self._worlds[seed] = World(self.cfg, seed)
        return self._worlds[seed]

    def worlds(self):
        return [self.world(s) for s in ARENA_SEEDS]


@pytest.fixture(scope="session")
def arena():
    return Arena()


@pytest.fixture(scope="session")
def small_world():
    """A cheap world for unit tests: fewer samples, shorter training."""
    cfg = ExperimentConfig(per_class=120, epochs=15, population=2, ensemble=2,
                           trigger_size=30, iterations=30, screening_models=2)
    return World(cfg, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
