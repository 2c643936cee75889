import contextlib
import os
import time

import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

os.environ.setdefault("Q4FG_THREADS", "1")

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True, scope="session")
def _single_thread_blas():
    with threadpool_limits(limits=1):
        yield


_ACCEPTANCE = pytest.StashKey[list]()


class CriterionRecorder:
    def __init__(self, lines):
        self.lines = lines

    @contextlib.contextmanager
    def __call__(self, number, title, budget_s, already_spent=0.0):
        # already_spent covers shared fixtures (a trained teacher) charged to this criterion
        t0 = time.perf_counter() - already_spent
        status, note = "FAIL", ""
        try:
            yield
            elapsed = time.perf_counter() - t0
            if elapsed > budget_s:
                note = " over budget"
                raise AssertionError(f"criterion {number} took {elapsed:.1f} s, budget {budget_s} s")
            status = "PASS"
        except BaseException as exc:
            if not note:
                note = f" {type(exc).__name__}"
            raise
        finally:
            elapsed = time.perf_counter() - t0
            self.lines.append(f"criterion {number} {status}  {title}  {elapsed:.1f} s / {budget_s} s{note}")


@pytest.fixture(scope="session")
def criterion(request):
    return CriterionRecorder(request.config.stash.setdefault(_ACCEPTANCE, []))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
