import sys
from pathlib import Path

# make the shared helper modules in tests/ importable
sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)
    print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")
