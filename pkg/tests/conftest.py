import time

import pytest

from dsgk import harness

DESK_SEEDS = (1, 2, 3, 4, 5)
DESK_VARIANTS = ("DSGK-K/T/C", "DSGK-C", "DSGK-T", "DSGK-K", "DSGK")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_runs():
    """Paired-seed runs on the default task of the variants the experiments compare.

    Returns ``({variant name: ExperimentRow}, seconds)``.
    """
    t0 = time.perf_counter()
    variants = [v for v in harness.ABLATION_VARIANTS if v[0] in DESK_VARIANTS]
    rows = harness.ablate(harness.RunConfig(), harness.SyntheticTaskSpec(), DESK_SEEDS, variants=variants)
    return {r.name: r for r in rows}, time.perf_counter() - t0
