import numpy as np
import pytest

from latentfusion.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def randt(rng, *shape, dtype=np.float64):
    return Tensor(rng.normal(size=shape), dtype=dtype)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed now and in the summary."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
