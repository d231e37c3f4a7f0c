import os

import numpy as np
import pytest

from silotrace import _accel

SALT = bytes.fromhex("00112233445566778899aabbccddeeff")


@pytest.fixture
def salt():
    return SALT


@pytest.fixture(params=["numpy", "numba"] if _accel.HAVE_NUMBA else ["numpy"])
def backend(request):
    prev = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(int(os.environ.get("SILOTRACE_TEST_SEED", "12345")))


_CRITERIA: dict = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.ok = False
        self.detail = ""

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.ok else 'FAIL'}] {self.title}: {self.detail}"


@pytest.fixture
def criterion():
    """Context manager that records a pass/fail line for an acceptance criterion."""
    from contextlib import contextmanager

    @contextmanager
    def track(number, title):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            c.ok = False
            c.detail = f"{c.detail} (raised {type(exc).__name__}: {exc})".strip()
            raise
        finally:
            _CRITERIA[number] = c
            print(c.line())

    return track


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n].line())
