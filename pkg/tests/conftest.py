import sys

import numpy as np
import pytest
import torch

from mpiqe.config import desk_config
from mpiqe.model import build_model

torch.set_num_threads(1)


@pytest.fixture
def cfg():
    return desk_config()


@pytest.fixture
def model(cfg):
    return build_model(cfg)


@pytest.fixture
def crops(cfg):
    g = torch.Generator().manual_seed(1)
    return torch.rand(3, 3, cfg.crop_size, cfg.crop_size, generator=g)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
