import numpy as np
import pytest

from hscurve.curve_geometry import circle, ellipse, make_chart, trefoil_like


@pytest.fixture(scope="session")
def curves():
    return {"circle": circle(2.0), "ellipse": ellipse(), "trefoil": trefoil_like()}


@pytest.fixture(scope="session")
def charts(curves):
    out = {}
    for name, cv in curves.items():
        for kind in ("rmf", "frenet"):
            out[name, kind] = make_chart(cv, 0.3, kind)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA = []


@pytest.fixture
def report():
    """``report(n, label, ok, detail)`` prints one line and records it for the summary."""
    def _report(n, label, ok, detail=""):
        line = f"criterion {n:>2} [{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        print(line)
        _CRITERIA.append(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
