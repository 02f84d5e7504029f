import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aape.embedio import SynthConfig, synth_dataset

settings.register_profile("aape", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("aape")


@pytest.fixture(scope="session")
def bench():
    """The default planted benchmark (C=20, d=64)."""
    return synth_dataset(SynthConfig())


@pytest.fixture(scope="session")
def small():
    """A quick planted dataset for unit tests."""
    return synth_dataset(SynthConfig(classes=6, dim=16, images_per_class=10, train_per_class=6,
                                     prompts=10, seed=3))


@pytest.fixture(scope="session")
def small_captions():
    return synth_dataset(SynthConfig(classes=6, dim=16, images_per_class=8, train_per_class=5,
                                     prompts=10, captions_per_image=3, seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print the one-line verdict for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
