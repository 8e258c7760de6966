import numpy as np
import pytest

from cgddpm.denoiser import DenoiserConfig
from cgddpm.diffusion import DiffusionSchedule

TOY_BETAS = (0.1, 0.2, 0.3, 0.4)


@pytest.fixture
def toy():
    """Four-step schedule with hand-checkable tables."""
    return DiffusionSchedule(np.array(TOY_BETAS))


@pytest.fixture
def tiny_config():
    """Smallest denoiser that still exercises every block type (8x8x4 patches)."""
    return DenoiserConfig(base_width=4, channel_mults=(1, 2), window=(2, 2, 2), heads=2, time_width=8, groups=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
