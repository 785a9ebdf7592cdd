import shutil
from importlib import resources

import pytest

from mmjoint.fixtures import nguyen_dupuis


@pytest.fixture(scope="session")
def nd():
    return nguyen_dupuis()


@pytest.fixture
def nd_bundle(tmp_path):
    """A writable copy of the shipped Nguyen-Dupuis bundle."""
    src = resources.files("mmjoint") / "data" / "nguyen_dupuis"
    dst = tmp_path / "nd"
    shutil.copytree(src, dst)
    return dst


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


@pytest.fixture
def verdict():
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
