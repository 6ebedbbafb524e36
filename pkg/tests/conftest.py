import pytest

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE = {}
COLLECTED = set()
ACCEPTANCE_TITLES = {
    1: "filter-bank analytic suite",
    2: "scattering properties",
    3: "gradient suite",
    4: "shape table conformance",
    5: "fusion contracts",
    6: "mAP oracle",
    7: "determinism",
    8: "desk-scale smoke experiment",
    9: "subsample sweep",
}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome, then asserts it."""

    def record(n: int, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({ACCEPTANCE_TITLES[n]}): {detail}"

    return record


def pytest_collection_finish(session):
    # runs after -k / -m deselection, so only selected criteria are reported
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker:
            COLLECTED.add(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not COLLECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(COLLECTED):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        line = f"criterion {n} {ACCEPTANCE_TITLES[n]}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
