import contextlib
import time
from dataclasses import dataclass

import pytest

from queryfuse import sim

_CRITERIA = pytest.StashKey[dict]()

# shared by the acceptance tests that need a trained checkpoint
TRAIN_SEEDS = range(1000, 3048)
VAL_SEEDS = range(5000, 5010)
EVAL_SEEDS = range(9000, 9020)


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool = False
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:>2}: {status} {self.title} ({self.detail}; {self.seconds:.1f}s)"


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line, pass or fail."""
    store = request.config.stash[_CRITERIA]

    @contextlib.contextmanager
    def record(number: int, title: str):
        out = Outcome(number, title)
        t0 = time.perf_counter()
        try:
            yield out
        except BaseException as exc:
            out.passed = False
            if not out.detail:
                out.detail = f"{type(exc).__name__}: {exc}".splitlines()[0]
            raise
        else:
            out.passed = True
        finally:
            out.seconds = time.perf_counter() - t0
            store[number] = out

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n].line())


@dataclass
class Trained:
    result: sim.TrainResult
    seconds: float

    @property
    def params(self):
        return self.result.params


@pytest.fixture(scope="session")
def trained():
    """The default desk-scale model, trained once per session (a few minutes)."""
    t0 = time.perf_counter()
    res = sim.train_toy(TRAIN_SEEDS, VAL_SEEDS, sim.TrainConfig())
    return Trained(res, time.perf_counter() - t0)
