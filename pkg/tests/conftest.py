import numpy as np
import pytest

from molmgm.config import Config
from molmgm.molgraph import MolGraph, generate_synthetic

TINY = dict(d_model=8, heads=2, layers=2, k_rbf=4, pe_dim=8, pe_heads=2, pe_layers=2, decoder_layers=2,
            rwse_steps=4)


@pytest.fixture
def tiny_cfg() -> Config:
    return Config(**TINY)


@pytest.fixture
def mols():
    return generate_synthetic(3, 6, (4, 9))


def water() -> MolGraph:
    return MolGraph(np.array([[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]),
                    np.array([3, 0, 0]), ((0, 1, 1), (0, 2, 1)))


def rand_perm(rng, n):
    return rng.permutation(n)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Collects key=value notes that end up on the criterion's summary line."""
    notes: dict = {}
    request.node.acceptance_notes = notes
    return notes


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    notes = getattr(item, "acceptance_notes", {})
    verdict = "PASS" if rep.passed else "FAIL"
    text = ", ".join(f"{k}={_fmt(v)}" for k, v in notes.items())
    ACCEPTANCE[number] = f"criterion {number:2d} {verdict}  {title}" + (f"  [{text}]" if text else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
