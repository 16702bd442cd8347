import numpy as np
import pytest

from yieldpaint import SyntheticConfig, generate_synthetic, scale_to_unit


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticConfig(seed=11), 20)


@pytest.fixture(scope="session")
def scaled_63():
    return scale_to_unit(generate_synthetic(SyntheticConfig(seed=5), 63))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
