"""Shared pytest plumbing: the acceptance-criteria summary block.

After a run that touched test_acceptance.py, print one PASS/FAIL line
per criterion so the verdicts are readable without scrolling the log.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")

_NAMES = {
    1: "gradient correctness",
    2: "loss identities",
    3: "oracle equivalences",
    4: "momentum algebra",
    5: "unit-norm invariant",
    6: "end-to-end synthetic learning",
    7: "example-sentence ablation direction",
    8: "sentence-number sweep",
    9: "zero-shot transfer",
    10: "orthogonal map recovery",
    11: "determinism and resumability",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[int, str] = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if match is None:
                continue
            if status == "passed" and report.when != "call":
                continue
            num = int(match.group(1))
            if outcomes.get(num) != "FAIL":
                outcomes[num] = label
    if not outcomes:
        return
    try:
        import sys

        MEASUREMENTS = sys.modules["test_acceptance"].MEASUREMENTS
    except Exception:
        MEASUREMENTS = {}
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(outcomes):
        detail = MEASUREMENTS.get(num, "")
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(
            f"criterion {num:2d} ({_NAMES.get(num, 'unknown')}): {outcomes[num]}{suffix}"
        )
