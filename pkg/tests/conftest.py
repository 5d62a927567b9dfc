import numpy as np
import pytest

from mwuf.features import ITEM, USER, EncodedDataset, FeatureField, FeatureSchema


def small_schema(k=4, n=2, m=1, n_items=12, n_users=9, card=5, multi=False):
    fields = [FeatureField("item_id", ITEM, is_id=True, vocab_size=n_items)]
    for i in range(n):
        fields.append(FeatureField(f"if{i}", ITEM, vocab_size=card,
                                   multi_valued=multi and i == 0))
    fields.append(FeatureField("user_id", USER, is_id=True, vocab_size=n_users))
    fields += [FeatureField(f"uf{i}", USER, vocab_size=card) for i in range(m)]
    return FeatureSchema(tuple(fields), k=k)


def random_dataset(schema, rows, rng, items=None):
    """Random encoded rows; multi-valued columns get 1-3 tokens padded with -1."""
    cols = {}
    for f in schema.item_features + schema.user_features:
        if f.multi_valued:
            mat = np.full((rows, 3), -1, dtype=np.int64)
            for r in range(rows):
                ln = rng.integers(1, 4)
                mat[r, :ln] = rng.integers(0, f.vocab_size, size=ln)
            cols[f.name] = mat
        else:
            cols[f.name] = rng.integers(0, f.vocab_size, size=rows)
    item = rng.integers(0, schema.n_items, size=rows) if items is None else np.asarray(items)
    return EncodedDataset(schema, item, rng.integers(0, schema.n_users, size=rows),
                          rng.integers(0, 2, size=rows), np.arange(rows), cols)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schema():
    return small_schema()


_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        number, title = marker.args
        _CRITERIA.append((number, title, status))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
