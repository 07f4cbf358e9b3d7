import numpy as np
import pytest
import torch

from binopose.geometry import RectifiedRig
from binopose.synth import SynthConfig, generate_scenes


@pytest.fixture
def rig():
    return RectifiedRig(1000.0, (128.0, 128.0), 200.0, (256, 256), 16)


@pytest.fixture
def desk_rig():
    return RectifiedRig(180.0, (128.0, 128.0), 200.0, (256, 256), 16)


@pytest.fixture(scope="session")
def small_scenes():
    rig = RectifiedRig(180.0, (128.0, 128.0), 200.0, (256, 256), 16)
    cfg = SynthConfig()
    return rig, cfg, generate_scenes(rig, cfg, 123, 12)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


def rel_close(a, b, tol):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)) < tol


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
