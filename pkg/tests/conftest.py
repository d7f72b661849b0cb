import numpy as np
import pytest
from hypothesis import settings

from malliavin_mc import _pykernels
from malliavin_mc._backend import available, load

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_acceptance(tag, passed, detail):
    line = f"{tag} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture(params=available())
def backend(request):
    return load(request.param)


@pytest.fixture
def pykernels():
    return _pykernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
