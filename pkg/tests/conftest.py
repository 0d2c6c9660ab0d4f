"""Shared test plumbing: the acceptance-criteria report printed after the run."""

ACCEPTANCE_TITLES = {
    1: "gradient suite",
    2: "loss oracles",
    3: "metric oracles",
    4: "synthetic benchmark: softmax vs pointce",
    5: "list-size sweep shape",
    6: "generation baseline consistency",
    7: "determinism and I/O",
    8: "zero-shot harness",
}

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    return criterion_line(number)


def criterion_line(number: int) -> str:
    title = ACCEPTANCE_TITLES[number]
    if number not in ACCEPTANCE_RESULTS:
        return f"[criterion {number}] NOT RUN  {title}"
    passed, detail = ACCEPTANCE_RESULTS[number]
    return f"[criterion {number}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in ACCEPTANCE_TITLES:
        terminalreporter.write_line(criterion_line(number))
