import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

import numpy as np
import pytest

from downvio.simsynth import preset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ideal_spec():
    return preset("p1-ideal")


# one PASS/FAIL line per acceptance criterion, printed after the test session
_VERDICTS: dict[str, str] = {}


def _criterion(name: str) -> str | None:
    if not name.startswith("test_ac"):
        return None
    return "AC-" + str(int(name[7:9]))


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records the outcome of the calling acceptance test."""
    tag = _criterion(request.node.name)

    def record(ok: bool, detail: str) -> bool:
        _VERDICTS[tag] = f"{tag:<5} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[tag])
        return ok

    return record


def pytest_runtest_logreport(report):
    tag = _criterion(report.location[2].split("[")[0])
    if tag and report.failed and tag not in _VERDICTS:
        _VERDICTS[tag] = f"{tag:<5} FAIL  {report.when} error: {report.longrepr.reprcrash.message if hasattr(report.longrepr, 'reprcrash') else report.longrepr}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(_VERDICTS, key=lambda t: int(t[3:])):
            terminalreporter.write_line(_VERDICTS[tag])
