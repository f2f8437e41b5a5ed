"""Terminal summary: one verdict line per acceptance check."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = []
    for key in ("passed", "failed", "error", "skipped"):
        reports.extend(terminalreporter.stats.get(key, []))
    rows = {}
    for rep in reports:
        if getattr(rep, "when", "call") != "call" and rep.outcome != "failed":
            continue
        nodeid = rep.nodeid
        if "test_acceptance.py::" not in nodeid:
            continue
        name = nodeid.split("::")[-1]
        verdict = {"passed": "PASS", "failed": "FAIL",
                   "skipped": "SKIP"}.get(rep.outcome, "FAIL")
        # a failed setup/teardown overrides an earlier pass
        if name not in rows or verdict == "FAIL":
            rows[name] = verdict
    if not rows:
        return
    tw = terminalreporter
    tw.section("acceptance checks")
    for name in sorted(rows):
        label = name.removeprefix("test_").replace("_", " ")
        tw.write_line(f"ACCEPTANCE {label}: {rows[name]}")
