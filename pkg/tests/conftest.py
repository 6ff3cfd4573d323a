import re

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 9


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def frames():
    from auheat.synth import synth_samples

    return [s for _, s in synth_samples(24, (6, 10, 12, 14, 17), seed=3, size=64)]


@pytest.fixture
def criterion():
    """Record an acceptance outcome; the summary prints one line per criterion."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion(\d+)_", item.name)
    if m and rep.failed and int(m.group(1)) not in ACCEPTANCE:
        ACCEPTANCE[int(m.group(1))] = (False, f"error: {call.excinfo.typename if call.excinfo else rep.when}")


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for rs in terminalreporter.stats.values() for r in rs
              if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
