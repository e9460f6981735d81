import os
import sys
import tempfile

import pytest

# Standard pytest hook to fix sys.path
_p = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if _p not in sys.path:
    sys.path.insert(0, _p)

from modules import config  # noqa: E402

# Keep test runs from appending to the project log
config.LOG_FILE = os.path.join(tempfile.gettempdir(), "id_prune_tests.log")


@pytest.fixture(autouse=True)
def _quiet_logging():
    saved = (config.LOG_FILE, config.DEBUG_LOGGING)
    config.DEBUG_LOGGING = False
    yield
    config.LOG_FILE, config.DEBUG_LOGGING = saved
