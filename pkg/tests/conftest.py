import numpy as np
import pytest

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance] criterion {number:2d} {name}: {status}"
    if detail:
        line += f"  ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small balanced toy benchmark shared by data/classifier/cli tests."""
    from dermdit.data import make_toy_benchmark

    root = tmp_path_factory.mktemp("toy_small")
    manifest = make_toy_benchmark(root, size=60, seed=11)
    return manifest
