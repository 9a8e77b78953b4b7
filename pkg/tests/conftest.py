import pytest

# filled by test_acceptance.py: criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
