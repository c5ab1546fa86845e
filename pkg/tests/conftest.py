import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from markov_bsde.chain import RateMatrix  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def flip():
    """Symmetric two-state chain with unit rates."""
    return RateMatrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))


@pytest.fixture
def three_state():
    return RateMatrix(np.array([[-1.0, 0.5, 0.7], [0.6, -1.3, 0.8], [0.4, 0.8, -1.5]]))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
