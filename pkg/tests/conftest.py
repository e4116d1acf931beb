import os
from pathlib import Path

import pytest

from minifair import synthetic

ML1M_ENV = "MINIFAIR_ML1M"

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    n, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if report.skipped and isinstance(report.longrepr, tuple):
            outcome += f" ({report.longrepr[2]})"
        _CRITERIA[n] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome:<5} {title}")


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory) -> Path:
    return synthetic.write_world(tmp_path_factory.mktemp("synth"), n_users=120, n_items=80,
                                 mean_activity=25, seed=7)


@pytest.fixture(scope="session")
def ml1m_dir() -> Path:
    path = os.environ.get(ML1M_ENV)
    if not path or not (Path(path) / "ratings.dat").exists():
        pytest.skip(f"MovieLens-1M not available (set {ML1M_ENV} to a directory with ratings.dat and users.dat)")
    return Path(path)
