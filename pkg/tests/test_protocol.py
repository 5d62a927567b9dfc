import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_schema
from helpers import pair_count_auc
from mwuf.config import ExperimentConfig
from mwuf.dataio import SyntheticSpec, generate_synthetic
from mwuf.features import EncodedDataset
from mwuf.protocol import (CSV_COLUMNS, PHASES, MetricError, ProtocolError, SplitSpec,
                           ablation_suite, auc, relaimpr, run_protocol, split_items, worker_count,
                           write_metrics_csv)


def test_auc_hand_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_ties_count_half():
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    assert auc([0.2, 0.5, 0.5, 0.9], [0, 1, 0, 1]) == pytest.approx(pair_count_auc(
        [0.2, 0.5, 0.5, 0.9], [0, 1, 0, 1]), abs=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pair_counting(pairs):
    scores = [s / 6 for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(MetricError):
            auc(scores, labels)
        return
    assert abs(auc(scores, labels) - pair_count_auc(scores, labels)) < 1e-12


def test_auc_rejects_bad_input():
    with pytest.raises(MetricError):
        auc([0.1, np.nan], [0, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [0, 2])
    with pytest.raises(MetricError):
        auc([0.1], [0, 1])


def test_relaimpr_values():
    assert relaimpr(0.6, 0.6) == 0.0
    assert relaimpr(0.7, 0.6) == pytest.approx(100.0)
    assert relaimpr(0.55, 0.6) == pytest.approx(-50.0)
    with pytest.raises(ZeroDivisionError):
        relaimpr(0.6, 0.5)


def _counts_dataset(counts, rng):
    """One row per interaction; item v appears counts[v] times at shuffled timestamps."""
    schema = small_schema(n_items=len(counts), n_users=5)
    items = np.repeat(np.arange(len(counts)), counts)
    ts = rng.permutation(len(items)) // 2  # duplicated timestamps exercise the stable sort
    n = len(items)
    cols = {f.name: np.zeros(n, dtype=np.int64) for f in schema.item_features + schema.user_features}
    return EncodedDataset(schema, items, np.zeros(n, dtype=np.int64), np.arange(n) % 2, ts, cols)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=15), st.integers(0, 2**16))
def test_split_properties(counts, seed):
    spec = SplitSpec(n=20, k=3)
    ds = _counts_dataset(counts, np.random.default_rng(seed))
    counts = np.array(counts)
    new = np.flatnonzero((counts > 9) & (counts < 20))
    if new.size == 0:
        with pytest.raises(ProtocolError):
            split_items(ds, spec)
        return
    ph = split_items(ds, spec)
    assert ph.old_items.tolist() == np.flatnonzero(counts > 20).tolist()
    assert ph.new_items.tolist() == new.tolist()
    assert set(ph.dropped_items) == set(np.flatnonzero(counts > 0)) - set(ph.old_items) - set(new)
    for name in ("warm-a", "warm-b", "warm-c"):
        part = ph.phase(name)
        assert np.array_equal(np.bincount(part.item_id, minlength=len(counts))[new], [3] * len(new))
    assert len(ph.test) == counts[new].sum() - 9 * len(new)
    for v in new:
        rows = np.concatenate([ph.slices[int(v)][p] for p in ("warm-a", "warm-b", "warm-c", "test")
                               if p in ph.slices[int(v)]])
        own = np.flatnonzero(ds.item_id == v)
        assert rows.tolist() == own[np.argsort(ds.timestamp[own], kind="stable")].tolist()


def test_split_spec_validation():
    with pytest.raises(ProtocolError):
        SplitSpec(n=15, k=5)


@pytest.fixture(scope="module")
def phases():
    data = generate_synthetic(SyntheticSpec(n_users=200, n_items=300, n_interactions=12000, seed=3),
                              k=4)
    return split_items(data.dataset, SplitSpec(n=60, k=5))


CFG = ExperimentConfig(k=4, hidden=8, meta_hidden=4, batch_size=64)


def test_protocol_is_deterministic(phases):
    a = run_protocol("wide_deep", "mwuf", phases, CFG, seed=5)
    b = run_protocol("wide_deep", "mwuf", phases, CFG, seed=5)
    assert a.auc == b.auc
    assert list(a.auc) == list(PHASES)
    c = run_protocol("wide_deep", "mwuf", phases, CFG, seed=6)
    assert c.auc != a.auc


def test_protocol_rejects_unknown_method(phases):
    with pytest.raises(ValueError):
        run_protocol("wide_deep", "dropoutnet", phases, CFG)


def test_ablation_suite_and_csv(phases, tmp_path):
    reports = ablation_suite(phases, CFG, seeds=[0, 1], base_model_kind="fm", workers=1)
    assert [(r.method, r.seed) for r in reports][:5] == [
        ("base", 0), ("mwuf_init", 0), ("mwuf_scale", 0), ("mwuf_shift", 0), ("mwuf", 0)]
    base = reports[0]
    assert all(v == 0.0 for v in base.relaimpr.values())
    # new items have no logged users before warm-a, so the shift is zero and the
    # shift-only variant scores exactly like common init
    by = {r.method: r.auc["cold"] for r in reports[:5]}
    assert by["mwuf_shift"] == by["mwuf_init"]
    path = tmp_path / "m.csv"
    write_metrics_csv(reports, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 1 + 10 * 4


def test_worker_count(monkeypatch):
    monkeypatch.setenv("MWUF_THREADS", "3")
    assert worker_count(10) == 3
    assert worker_count(2) == 2
    assert worker_count(5, workers=1) == 1
