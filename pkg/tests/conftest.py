"""Shared pytest wiring: the per-criterion acceptance summary block."""

import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRIT = re.compile(r"test_criterion(\d+)")

CRITERIA = {
    1: "format round-trip + fuzz",
    2: "channel oracle",
    3: "parameter accounting",
    4: "training sanity",
    5: "synthetic base-model accuracy",
    6: "transfer sweep shape",
    7: "ablation shape",
    8: "reproducibility",
    9: "metric unit tests",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    tr = terminalreporter
    status: dict[int, str] = {}
    rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}

    def note(n, s):
        if n not in status or rank[s] > rank[status[n]]:
            status[n] = s

    for outcome, label in [("passed", "PASS"), ("skipped", "SKIP"), ("failed", "FAIL")]:
        for rep in tr.stats.get(outcome, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if m:
                note(int(m.group(1)), label)
    if not status:
        return
    tr.write_sep("-", "acceptance criteria")
    for n in sorted(status):
        name = CRITERIA.get(n, "")
        tr.write_line(f"criterion {n} ({name}): {status[n]}")
