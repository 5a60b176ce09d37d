import pytest

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def record():
    """Store a one-line verdict for an acceptance criterion and echo it."""

    def _record(number: int, passed: bool | None, detail: str) -> None:
        verdict = {True: "PASS", False: "FAIL", None: "REPORTED"}[passed]
        ACCEPTANCE[number] = (verdict, detail)
        print(f"acceptance {number:>2}: {verdict} {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:>2}. {verdict:<8} {detail}")
