import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "kgas", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("kgas")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = pytest.StashKey[list]()


class Criterion:
    """Collects one acceptance line: measured values, runtime and the verdict."""

    def __init__(self, name, budget=None):
        self.name, self.budget = name, budget
        self.start = time.perf_counter()
        self.line = None

    def report(self, ok, **measured):
        elapsed = time.perf_counter() - self.start
        if self.budget is not None:
            ok = ok and elapsed < self.budget
        vals = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in measured.items())
        budget = f" (< {self.budget:g}s)" if self.budget is not None else ""
        self.line = f"{'PASS' if ok else 'FAIL'} {self.name}: {vals} runtime={elapsed:.2f}s{budget}"
        print(self.line)
        return ok


@pytest.fixture
def criterion(request):
    made = []

    def make(name, budget=None):
        made.append(Criterion(name, budget))
        return made[-1]

    yield make
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    for c in made:
        lines.append(c.line or f"FAIL {c.name}: raised before reporting")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
