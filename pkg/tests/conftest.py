"""Shared pytest hooks: the acceptance suite records one verdict per criterion
and the terminal summary prints them in order."""

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str, note: bool = False) -> None:
    verdict = "PASS" if passed else "FAIL"
    if passed and note:
        verdict = "PASS (reported)"
    ACCEPTANCE[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{verdict}] {number:2d}. {title}: {detail}")
