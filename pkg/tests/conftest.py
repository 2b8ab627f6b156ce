from pathlib import Path

import pytest
from hypothesis import settings

from dfid import experiment as ex

settings.register_profile("dfid", deadline=None, max_examples=60)
settings.load_profile("dfid")

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


@pytest.fixture(scope="session")
def smoke_cfg():
    return ex.load_config(SMOKE)


@pytest.fixture(scope="session")
def smoke_upstream(smoke_cfg):
    """Population, splits, operators, teacher and student for the smoke config."""
    return ex.build_upstream(smoke_cfg, 7)


ACCEPTANCE = {}  # criterion number -> printed line, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
