import re

import numpy as np
import pytest

from strata_miner import CohortTable

_CRITERIA = {}
_TITLES = {
    1: "quality-measure arithmetic",
    2: "beam/exhaustive oracle equivalence",
    3: "planted-rule recovery",
    4: "randomized property suite",
    5: "labeling table",
    6: "protocol scale and determinism",
    7: "CI aggregation",
    8: "stratification",
}


def random_table(rng, n_rows=None, n_features=None, density=None, strata=None):
    """Random binary table with a label loosely tied to the first columns."""
    n_rows = int(rng.integers(1, 400)) if n_rows is None else n_rows
    n_features = int(rng.integers(1, 10)) if n_features is None else n_features
    density = rng.uniform(0.05, 0.7, size=n_features) if density is None else density
    x = rng.random((n_rows, n_features)) < density
    logit = x[:, : min(3, n_features)].sum(axis=1) - 1.0 + rng.normal(0, 1, n_rows)
    y = logit > 0
    return CohortTable.from_dense(x, y, [f"f{i}" for i in range(n_features)], strata)


@pytest.fixture
def rng(request):
    # Seeded per test so failures reproduce.
    seed = sum(ord(c) for c in request.node.name)
    return np.random.default_rng(seed)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        checks = _CRITERIA.setdefault(int(m.group(1)), [])
        checks.append((report.nodeid.split("::")[-1], status))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, checks in sorted(_CRITERIA.items()):
        failed = [name for name, status in checks if status != "PASS"]
        status = "FAIL" if failed else "PASS"
        detail = f" ({', '.join(failed)})" if failed else ""
        terminalreporter.write_line(
            f"criterion {num} {_TITLES.get(num, '')}: {status} [{len(checks) - len(failed)}/{len(checks)} checks]"
            f"{detail}")
