import pytest

from helpers import ACCEPTANCE_RESULTS
from lt3d.hierarchy import load_hierarchy


@pytest.fixture(scope="session")
def nuscenes():
    return load_hierarchy("nuscenes")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {num:2d}. {title} -- {detail}")
