import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qslate.ingest import ItemCatalog, ItemRecord, SessionRecord

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")

# Verdict lines recorded by the acceptance tests, echoed after the run.
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def make_catalog(prices=None) -> ItemCatalog:
    """Nine items: 1-3 on location 1, 4-6 on 2, 7-9 on 3; price = id by default."""
    prices = prices or {i: float(i) for i in range(1, 10)}
    records = [
        ItemRecord(i, (0.1 * i, 0.2, 0.3, 0.4, 0.5), prices[i], (i - 1) // 3 + 1)
        for i in range(1, 10)
    ]
    return ItemCatalog.from_records(records)


def make_session(labels, user_id=1, slate=None, clicks=(), timestamp=1_700_000_000):
    slate = slate or tuple(range(1, 10))
    return SessionRecord(
        user_id=user_id,
        clicked_items=frozenset(clicks),
        portraits=tuple(float(i) for i in range(10)),
        exposed_slate=tuple(slate),
        purchase_labels=tuple(bool(b) for b in labels),
        timestamp=timestamp,
    )


@pytest.fixture
def catalog9():
    return make_catalog()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
