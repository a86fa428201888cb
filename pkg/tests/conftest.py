import re

CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    results = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or getattr(rep, "when", None) not in ("setup", "call"):
                continue
            number = int(m.group(1))
            notes = [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
            prev = results.get(number)
            failed = rep.failed or (prev is not None and prev[1])
            text = notes[0] if notes else (prev[2] if prev else "")
            if rep.skipped:
                results[number] = (m.group(2), None, "skipped")
            else:
                results[number] = (m.group(2), failed, text)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, failed, text = results[number]
        status = "SKIP" if failed is None else ("FAIL" if failed else "PASS")
        label = name.replace("_", " ")
        terminalreporter.write_line(f"{status} criterion {number:2d} {label}: {text}".rstrip(": "))
