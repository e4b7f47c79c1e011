import numpy as np
import pytest

import lindrate as lr

# One line per acceptance criterion is printed at the end of the run.
ACCEPTANCE_REPORT: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_REPORT.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_REPORT:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line("  " + line)


@pytest.fixture(scope="session")
def params_star() -> lr.TwoLevelParams:
    """The reference parameter point used throughout the suite."""
    return lr.TwoLevelParams()


@pytest.fixture(scope="session")
def model_star(params_star):
    return lr.build_model(params_star)


@pytest.fixture(scope="session")
def eq_star(params_star):
    coeffs, density = lr.equilibrium_closed_form(params_star)
    return coeffs, density


@pytest.fixture(scope="session")
def mixed_state() -> lr.BlockDensity:
    """A generic normalized state with coherences in both bands."""
    b1 = np.array([[0.42, 0.10 + 0.05j], [0.10 - 0.05j, 0.18]])
    b2 = np.array([[0.12, -0.04 + 0.02j], [-0.04 - 0.02j, 0.28]])
    return lr.BlockDensity(np.stack([b1, b2]), normalized=True).require_valid()


def tracenorm_gap(a: np.ndarray, b: np.ndarray) -> float:
    return lr.trace_norm(lr.BlockDensity(np.asarray(a) - np.asarray(b)))
