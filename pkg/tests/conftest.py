import json
import os
import sys

import numpy as np
import pytest

from benard_ldp.spectral_core import Domain, build_basis

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def frozen():
    with open(os.path.join(os.path.dirname(__file__), "oracle_values.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="session", params=["free_slip", "no_slip"])
def basis(request):
    return build_basis(Domain(), 4, 4, bc_mode=request.param)


@pytest.fixture(scope="session")
def free_basis():
    return build_basis(Domain(), 4, 4, bc_mode="free_slip")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = []


@pytest.fixture
def accept():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
