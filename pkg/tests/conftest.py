import sys
import warnings
from pathlib import Path

# oracles.py lives next to the tests
sys.path.insert(0, str(Path(__file__).parent))

# pre-2021.6 TBB in this environment; numba falls back to another layer
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

# one line per acceptance criterion, echoed after the test summary
PASS_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if PASS_LINES:
        terminalreporter.section("acceptance criteria")
        for line in PASS_LINES:
            terminalreporter.write_line(line)
