import importlib

import numpy as np
import pytest

from gramclust import _pykernels, kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _backends():
    out = [pytest.param(_pykernels, id="python")]
    try:
        out.append(pytest.param(importlib.import_module("gramclust._ckernels"), id="cython"))
    except ImportError:
        out.append(pytest.param(None, id="cython", marks=pytest.mark.skip(reason="extension not built")))
    return out


@pytest.fixture(params=_backends())
def backend(request):
    return request.param


@pytest.fixture
def pure_python(monkeypatch):
    """Route every kernel through the numpy fallback for one test."""
    for name in kernels.__all__:
        if name != "BACKEND":
            monkeypatch.setattr(kernels, name, getattr(_pykernels, name))
    monkeypatch.setattr(kernels, "BACKEND", "python")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
