import sys

import numpy as np
import pytest

from epic.backbone import BackboneConfig, FrozenBackbone


@pytest.fixture(scope="session")
def backbone():
    return FrozenBackbone.build(BackboneConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
