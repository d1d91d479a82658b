"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

CRITERIA = {
    "A1": "solver-oracle equivalence",
    "A2": "prox/projection correctness",
    "A3": "cone kernel validity",
    "A4": "exact recovery under certificates",
    "A5": "scaling law of m*_0.9",
    "A6": "robustness linearity",
    "A7": "structural invariants",
    "A8": "checker cross-consistency",
    "A9": "flatness and sign stability",
    "A10": "Kronecker width scaling",
}

_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(a\d+)_", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        prev = _results.get(key)
        if prev is None or prev[0] == "PASS":
            outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            _results[key] = (outcome, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key, desc in CRITERIA.items():
        if key not in _results:
            tr.write_line(f"{key:<4} NOT RUN  {desc}")
            continue
        outcome, detail, dur = _results[key]
        extra = f"  [{detail}]" if detail else ""
        tr.write_line(f"{key:<4} {outcome:<7}  {desc} ({dur:.1f} s){extra}")
