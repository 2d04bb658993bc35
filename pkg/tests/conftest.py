import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("QUADTAIL_FAST"):
        skip = pytest.mark.skip(reason="QUADTAIL_FAST set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    import acceptance

    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(acceptance.line(k, results[k]))
