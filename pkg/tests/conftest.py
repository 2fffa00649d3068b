"""Per-criterion PASS/FAIL summary for tests marked ``acceptance(n)``."""

from __future__ import annotations

from collections import defaultdict

import pytest

CRITERIA = {
    1: "McNemar on (51, 22, 2, 24): chi2 = 15.04 +/- 0.01, p < 0.001, < 1 s",
    2: "paired bootstrap n=99 seed 42: delta 20.2 +/- 0.1, CI within 1.5 of [12.1, 29.3], p <= 1e-4, < 5 s",
    3: "per-category: temporal +40 CI within 3 of [15, 65], p <= 0.01; single-session 0, p = 0.657 +/- 0.1",
    4: "accuracy accounting reproduces every printed per-type and overall figure",
    5: "routing truth tables: 27 x stakes (both schemes) and 256 coding combinations, < 1 s",
    6: "1,000 generated entries round-trip; scene goldens end with the disclaimer",
    7: "three-state oracle over pair / fact-only / empty / dangling-link stores",
    8: "end-to-end mock run (C6 vs C7): scenes, coverage, byte-identical resume, < 10 s",
    9: "token accounting: ledger totals and report deltas match hand computation",
}

_results: dict[int, list[bool]] = defaultdict(list)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "_criterion", None)
    if crit is not None:
        _results[crit].append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result()._criterion = int(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        runs = _results.get(n)
        if not runs:
            status = "NOT RUN"
        else:
            status = "PASS" if all(runs) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
