import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lacecp.kernel import make_uniform_kernel  # noqa: E402
from lacecp.model import ModelParams  # noqa: E402


def make_params(d=1, L=1, eps=1.0, lam=1.0, n_max=2, R=-1):
    return ModelParams(make_uniform_kernel(d, L), eps, lam, n_max, R)


@pytest.fixture
def params_factory():
    return make_params


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("LACECP_CACHE", str(tmp_path / "cache"))


def _order(row):
    tag = str(row[0])
    digits = "".join(c for c in tag if c.isdigit())
    return int(digits), tag


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, took, detail in sorted(acceptance_log.RESULTS, key=_order):
        line = f"[{status}] {number:>4} {title} ({took:.1f}s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
