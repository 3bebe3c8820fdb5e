import re

# criterion id -> [title, outcome, detail]
_CRITERIA: dict = {}
_NAME = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    cid = int(m.group(1))
    entry = _CRITERIA.setdefault(cid, ["", "PASS", ""])
    if report.failed:
        entry[1] = "FAIL"
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "title":
            entry[0] = value
        elif key == "detail":
            entry[2] = f"{entry[2]} | {value}" if entry[2] else value


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[cid]
        terminalreporter.write_line(f"C{cid} {outcome} {title}: {detail}")
