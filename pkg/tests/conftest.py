"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            status = ("SKIP", reason.removeprefix("Skipped: "))
        else:
            status = ("PASS" if report.passed else "FAIL", "")
        _VERDICTS.setdefault(number, (title, []))[1].append((item.name, *status))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, parts = _VERDICTS[number]
        states = {s for _, s, _ in parts}
        if "FAIL" in states:
            verdict = "FAIL"
        elif states == {"PASS"}:
            verdict = "PASS"
        elif states == {"SKIP"}:
            verdict = "SKIP"
        else:
            verdict = "PARTIAL"  # runnable parts passed, data-gated parts skipped
        notes = "; ".join(f"{name} skipped: {why}" for name, s, why in parts if s == "SKIP")
        line = f"criterion {number:>2} {verdict}  {title}"
        if notes:
            line += f"  [{notes}]"
        terminalreporter.write_line(line)
