import time

import pytest

from _helpers import small_config
from subjectdiff.backbone import BackboneConfig, Model
from subjectdiff.checks import grad_model_config
from subjectdiff.curriculum import render_scene

_ACCEPTANCE = []


@pytest.fixture
def small_model():
    return Model.create(small_config(), seed=3)


@pytest.fixture(scope="session")
def default_model():
    return Model.create(BackboneConfig(), seed=0)


@pytest.fixture
def grad_model():
    return Model.create(grad_model_config(), seed=0)


@pytest.fixture
def ref_image():
    return render_scene("circle", "red", "grass", (0.3, 0.05, -0.05, 0.25), 16)


@pytest.fixture
def ref_image32():
    return render_scene("square", "blue", "sand", (0.7, 0.0, 0.1, 0.22), 32)


@pytest.fixture
def acceptance(request):
    """Times a criterion, enforces its budget and records a PASS/FAIL line."""
    number, title, budget = request.node.get_closest_marker("criterion").args
    t0 = time.perf_counter()
    yield budget
    elapsed = time.perf_counter() - t0
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed and elapsed < budget
    _ACCEPTANCE.append((number, title, ok, elapsed, budget))
    assert elapsed < budget, f"criterion {number} took {elapsed:.2f}s, budget {budget}s"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget_seconds): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, elapsed, budget in sorted(_ACCEPTANCE):
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({elapsed:.2f}s / {budget}s)")

