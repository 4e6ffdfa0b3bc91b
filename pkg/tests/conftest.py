"""Shared pytest plumbing: the acceptance-criteria checklist.

``test_acceptance.py`` records named checks through the ``acceptance``
fixture; after the run a summary block prints exactly one PASS/FAIL line
per criterion (or NOT RUN when a criterion's test never executed).
"""

from __future__ import annotations

import pytest

CRITERIA = (
    ("C1", "DP decoder matches the brute-force oracle"),
    ("C2", "analytic gradients match finite differences"),
    ("C3", "policy gradient unbiased on the enumerable toy"),
    ("C4", "detection learning IoU ordering"),
    ("C5", "staging pipeline accuracy orderings"),
    ("C6", "metric identities"),
    ("C7", "seeded reruns byte-identical"),
    ("C8", "decoded sequences monotone"),
)

#: criterion id -> [(passed, detail), ...] in check order
_CHECKS: dict[str, list[tuple[bool, str]]] = {}


@pytest.fixture
def acceptance():
    """Record one named acceptance check, then assert it."""

    def check(criterion: str, passed: bool, detail: str) -> None:
        _CHECKS.setdefault(criterion, []).append((bool(passed), detail))
        assert passed, f"{criterion}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CHECKS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for crit, title in CRITERIA:
        checks = _CHECKS.get(crit)
        if checks is None:
            terminalreporter.write_line(f"ACCEPTANCE {crit}: NOT RUN - {title}")
            continue
        failures = [detail for ok, detail in checks if not ok]
        if failures:
            terminalreporter.write_line(f"ACCEPTANCE {crit}: FAIL - {failures[0]}")
        else:
            joined = "; ".join(detail for _, detail in checks)
            terminalreporter.write_line(f"ACCEPTANCE {crit}: PASS - {joined}")
