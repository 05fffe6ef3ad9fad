import time

import numpy as np
import pytest

from trialign import datagen, trainer

ACCEPTANCE_SEEDS = (42, 7, 1234)


@pytest.fixture(scope="session")
def default_split():
    return datagen.generate_dataset(8000, 1000, seed=42, noise_level=0.05)


@pytest.fixture(scope="session")
def small_split():
    return datagen.generate_dataset(256, 64, seed=3, noise_level=0.05)


class RunCache:
    """Trains each (loss kind, seed) once per session on the default data."""

    def __init__(self, split):
        self.split = split
        self._runs = {}
        self.seconds = {}

    def get(self, loss_kind: str, seed: int = 42) -> tuple[trainer.TrainConfig, trainer.TrainResult]:
        key = (loss_kind, seed)
        if key not in self._runs:
            cfg = trainer.TrainConfig(loss_kind=loss_kind, seed=seed)
            start = time.perf_counter()
            self._runs[key] = (cfg, trainer.train_run(cfg, self.split))
            self.seconds[key] = time.perf_counter() - start
        return self._runs[key]


@pytest.fixture(scope="session")
def runs(default_split):
    return RunCache(default_split)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
