import time

from hypothesis import settings

# fixed example streams so every run of the suite checks the same cases
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")

SUITE_BUDGET_S = 30 * 60

# (criterion id, passed, detail) lines collected by the acceptance tests
ACCEPTANCE = []


def record(criterion, passed, detail):
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_sessionstart(session):
    session.config._wellcast_started = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - session.config._wellcast_started
    session.config._wellcast_elapsed = elapsed
    if elapsed > SUITE_BUDGET_S and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    elapsed = getattr(config, "_wellcast_elapsed", 0.0)
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    ok = elapsed <= SUITE_BUDGET_S
    terminalreporter.write_line(
        f"[{'PASS' if ok else 'FAIL'}] 8-runtime: whole suite took {elapsed:.0f}s (budget {SUITE_BUDGET_S}s)"
    )
