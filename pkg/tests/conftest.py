"""Prints one PASS/FAIL line per acceptance criterion after the run."""

CRITERIA = {
    1: "gradient suite vs finite differences",
    2: "shape/contract suite",
    3: "reduction to plain MHSA",
    4: "metric oracles",
    5: "parameter accounting",
    6: "desk-scale separation experiment",
    7: "ablation direction (CLS enrichment)",
    8: "protocol fidelity",
    9: "format round-trips",
}


def _criterion(nodeid):
    marker = "test_acceptance.py::test_criterion_"
    if marker not in nodeid:
        return None
    return int(nodeid.split(marker, 1)[1].split("_", 1)[0])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    status = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            n = _criterion(getattr(rep, "nodeid", ""))
            if n is not None and getattr(rep, "when", "call") == "call":
                worst = status.get(n, "passed")
                order = {"passed": 0, "skipped": 1, "failed": 2, "error": 2}
                if order.get(outcome, 2) > order.get(worst, 0):
                    status[n] = outcome
                else:
                    status.setdefault(n, outcome)
    if not status:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in status:
            continue
        word = {"passed": "PASS", "skipped": "SKIP"}.get(status[n], "FAIL")
        tw.write_line(f"criterion {n} ({CRITERIA[n]}): {word}")
