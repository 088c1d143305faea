import numpy as np
import pytest

from raml.backbone import BackboneConfig
from raml.dataio import SyntheticDatasetSpec, gen_synthetic_dataset
from raml.trainer import TrainConfig, train_teacher


@pytest.fixture(scope="session")
def desk_split():
    return gen_synthetic_dataset(SyntheticDatasetSpec()).split()


@pytest.fixture(scope="session")
def quick_teacher(desk_split):
    """A desk-profile teacher with a shortened schedule, shared by module tests."""
    train, _ = desk_split
    return train_teacher(train, BackboneConfig(), TrainConfig(epochs=15))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance verdict and fail the test when it does not hold."""
    verdicts = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, ok: bool, detail: str):
        verdicts[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        ok, detail = verdicts[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
