import numpy as np
import pytest

from convemo import numerics as nx


@pytest.fixture(autouse=True)
def float64():
    """Tests and oracles run in 64-bit unless they opt out."""
    with nx.default_dtype("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grad_matches(f, params, h=1e-5, rtol=1e-4, atol=1e-9):
    """Analytic vs central-difference gradient with an absolute floor.

    The pure relative measure cannot resolve coordinates whose true gradient
    is exactly zero (e.g. softmax shift directions), so unit tests use this.
    """
    for t in params:
        t.requires_grad, t.grad = True, None
    nx.backward(f())
    for t in params:
        an = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        num = np.empty(flat.size)
        with nx.no_grad():
            for i in range(flat.size):
                o = flat[i]
                flat[i] = o + h
                fp = f().item()
                flat[i] = o - h
                fm = f().item()
                flat[i] = o
                num[i] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(an, num, rtol=rtol, atol=atol)


# acceptance criteria report one line each, shown after the run even with capture on
ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
