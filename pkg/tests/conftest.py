import sys

import pytest
import torch

from clsr.config import ContrastiveConfig, LossWeights, NetworkSpec, OptimSettings

torch.use_deterministic_algorithms(True)


@pytest.fixture
def small_spec():
    return NetworkSpec(base_channels=4, n_rcab_blocks=2, reduction=2, disc_stages=2)


@pytest.fixture
def small_spec_122():
    return NetworkSpec(base_channels=4, n_rcab_blocks=1, reduction=2, disc_stages=2, factors=(1, 2, 2))


@pytest.fixture
def small_spec_2d():
    return NetworkSpec(base_channels=4, n_rcab_blocks=1, reduction=2, disc_stages=2, ndim=2, factors=(2, 2))


@pytest.fixture
def optim_settings():
    return OptimSettings(batch_size=2)


@pytest.fixture
def cl_cfg():
    return ContrastiveConfig()


@pytest.fixture
def weights():
    return LossWeights()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
