import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


def pytest_addoption(parser):
    parser.addoption(
        "--full",
        action="store_true",
        default=False,
        help="run the multi-hour full-dataset reproduction checks",
    )


@pytest.fixture
def full_run(request):
    return request.config.getoption("--full")
