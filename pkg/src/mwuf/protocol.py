"""Old/new item splits, the phased cold-start evaluation, AUC and RelaImpr."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ExperimentConfig, rng_for
from .features import EncodedDataset
from .models import Recommender, minibatches, pretrain
from .warmup import MetaWarmUp, common_init, train_meta

log = logging.getLogger(__name__)

PHASES = ("cold", "warm-a", "warm-b", "warm-c")
METHODS = ("base", "mwuf_init", "mwuf_scale", "mwuf_shift", "mwuf")
_MODE = {"base": "none", "mwuf_init": "none", "mwuf_scale": "scale",
         "mwuf_shift": "shift", "mwuf": "full"}


class ProtocolError(ValueError):
    pass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

def auc(scores, labels):
    """Area under the ROC curve via average ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("AUC is undefined when only one class is present")
    if not np.isfinite(scores).all():
        raise MetricError("scores contain NaN or Inf")
    order = np.argsort(scores, kind="mergesort")
    return float(kernels.rank_auc_sorted(np.ascontiguousarray(scores[order]),
                                         np.ascontiguousarray(labels[order], dtype=np.int8)))


def relaimpr(measured_auc, base_auc):
    """Relative improvement (percent) over a base model, measured against random guessing."""
    if base_auc == 0.5:
        raise ZeroDivisionError("RelaImpr is undefined for a base AUC of 0.5")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    n: int = 200
    k: int = 20

    def __post_init__(self):
        if self.n <= 3 * self.k:
            raise ProtocolError(f"threshold N={self.n} must exceed 3*K={3 * self.k}")


@dataclass
class PhaseDatasets:
    old: EncodedDataset
    warm_a: EncodedDataset
    warm_b: EncodedDataset
    warm_c: EncodedDataset
    test: EncodedDataset
    old_items: np.ndarray
    new_items: np.ndarray
    dropped_items: np.ndarray
    slices: dict = field(default_factory=dict)

    @property
    def schema(self):
        return self.old.schema

    def phase(self, name):
        return {"warm-a": self.warm_a, "warm-b": self.warm_b,
                "warm-c": self.warm_c, "test": self.test, "old": self.old}[name]


def split_items(dataset, spec):
    """Group items by sample count and cut each new item's timeline into phases.

    Items with more than N samples are old. Items with between 3K and N
    samples (both exclusive) are new: their first K, second K and third K
    samples by timestamp form warm-a/b/c, the rest is the test set. Items
    with at most 3K samples are dropped.
    """
    order = dataset.time_order()
    items = dataset.item_id[order]
    counts = np.bincount(dataset.item_id)
    old_items = np.flatnonzero(counts > spec.n)
    new_items = np.flatnonzero((counts > 3 * spec.k) & (counts < spec.n))
    present = np.flatnonzero(counts > 0)
    dropped = np.setdiff1d(present, np.union1d(old_items, new_items))
    if new_items.size == 0:
        raise ProtocolError(f"no item has between {3 * spec.k} and {spec.n} samples")

    # rank of each row within its item's timeline
    by_item = np.argsort(items, kind="stable")
    sorted_items = items[by_item]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_items)) + 1]
    run_start = np.repeat(starts, np.diff(np.r_[starts, len(items)]))
    position = np.empty(len(items), dtype=np.int64)
    position[by_item] = np.arange(len(items)) - run_start

    is_old = np.isin(items, old_items)
    is_new = np.isin(items, new_items)
    k = spec.k
    groups = {
        "warm-a": is_new & (position < k),
        "warm-b": is_new & (position >= k) & (position < 2 * k),
        "warm-c": is_new & (position >= 2 * k) & (position < 3 * k),
        "test": is_new & (position >= 3 * k),
    }
    slices = {}
    for name, mask in groups.items():
        rows = order[mask]
        for v in np.unique(items[mask]):
            slices.setdefault(int(v), {})[name] = rows[items[mask] == v]
    return PhaseDatasets(
        old=dataset.take(order[is_old]),
        warm_a=dataset.take(order[groups["warm-a"]]),
        warm_b=dataset.take(order[groups["warm-b"]]),
        warm_c=dataset.take(order[groups["warm-c"]]),
        test=dataset.take(order[groups["test"]]),
        old_items=old_items, new_items=new_items, dropped_items=dropped, slices=slices,
    )


# ---------------------------------------------------------------- protocol

@dataclass
class MetricReport:
    method: str
    seed: int
    base_model: str
    auc: dict
    relaimpr: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rows(self):
        for phase in PHASES:
            r = self.relaimpr.get(phase)
            yield {"method": self.method, "seed": self.seed, "phase": phase,
                   "auc": f"{self.auc[phase]:.6f}",
                   "relaimpr_vs_base": "" if r is None else f"{r:.4f}"}


CSV_COLUMNS = ("method", "seed", "phase", "auc", "relaimpr_vs_base")


def write_metrics_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerows(rep.rows())


def attach_relaimpr(reports, base_reports):
    """Fill RelaImpr against the base-method report of the same seed."""
    base_by_seed = {r.seed: r for r in base_reports}
    for rep in reports:
        base = base_by_seed.get(rep.seed)
        if base is None:
            continue
        rep.relaimpr = {p: relaimpr(rep.auc[p], base.auc[p])
                        for p in PHASES if base.auc[p] != 0.5}
    return reports


def pretrain_base(kind, phases, config, seed):
    rec = Recommender.create(phases.schema, kind, rng_for(seed, "pretrain.init"),
                             hidden=config.hidden, init_std=config.init_std)
    history = pretrain(rec, phases.old, epochs=config.pretrain_epochs,
                       batch_size=config.batch_size, lr=config.lr,
                       rng=rng_for(seed, "pretrain.shuffle"))
    rec.pretrain_history = history
    return rec


def build_warmup(rec, method, phases, config, seed, meta_state=None):
    """Warm-up container for ``method``; MWUF variants train their meta nets on old items."""
    mode = _MODE[method]
    init = common_init(rec.embeddings.item_table, phases.old_items)
    warm = MetaWarmUp(rec.schema, init, rng_for(seed, "meta.init"), hidden=config.meta_hidden,
                      cap=config.interaction_cap, mode=mode)
    if method == "base":
        rng = rng_for(seed, "new_item.init")
        new = phases.new_items
        warm.cold.table.data[new] = rng.normal(0.0, config.init_std, size=(len(new), rec.schema.k))
        return warm, None
    if mode == "none":
        return warm, None
    if meta_state is not None:
        load_params(warm.parameters(), meta_state)
        warm.cold.reset_rows(phases.new_items)
        return warm, None
    optimizers = warm.make_optimizers(config.lr, config.meta_lr)
    base_opt = _base_optimizer(rec, config)
    train_meta(rec, warm, phases.old, epochs=config.meta_epochs, batch_size=config.batch_size,
               optimizers=optimizers, base_opt=base_opt)
    return warm, optimizers


def _base_optimizer(rec, config):
    if not config.online_base_update:
        return None
    from .numerics import Adam
    rec.unfreeze()
    return Adam(rec.parameters().values(), lr=config.lr)


def load_params(params, state):
    for name, p in params.items():
        if name not in state:
            raise KeyError(f"checkpoint lacks {name!r}")
        if state[name].shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
        p.data = np.array(state[name], dtype=p.data.dtype)


def evaluate_set(rec, warm, ds, batch_size=4096):
    scores = np.empty(len(ds), dtype=np.float64)
    for idx in minibatches(len(ds), batch_size):
        scores[idx] = warm.predict(rec, ds.take(idx))
    return auc(scores, ds.label)


def update_phase(rec, warm, ds, optimizers, config, rng, base_opt=None):
    cold_opt, meta_opt = optimizers
    batch = min(config.batch_size, len(ds))
    for _ in range(config.phase_epochs):
        for idx in minibatches(len(ds), batch, rng):
            warm.train_step(rec, ds.take(idx), cold_opt, meta_opt, base_opt)


def run_protocol(base_model_kind, method, phases, config=None, seed=0, pretrained=None,
                 meta_state=None):
    """Pretrain (or reuse ``pretrained``), prepare ``method``, then evaluate cold and three warm phases.

    The cold phase is scored on warm-a; after updating new item embeddings
    on warm-a/b/c the model is scored on warm-b, warm-c and test.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    config = config or ExperimentConfig()
    if pretrained is None:
        rec = pretrain_base(base_model_kind, phases, config, seed)
    else:
        rec = pretrained.clone()
    rec.freeze()
    warm, optimizers = build_warmup(rec, method, phases, config, seed, meta_state)
    if config.online_base_update:
        rec.freeze()
    if optimizers is None:
        optimizers = warm.make_optimizers(config.lr, config.meta_lr)

    results = {"cold": evaluate_set(rec, warm, phases.warm_a)}
    rng = rng_for(seed, "phase.shuffle")
    for name, train, test in (("warm-a", phases.warm_a, phases.warm_b),
                              ("warm-b", phases.warm_b, phases.warm_c),
                              ("warm-c", phases.warm_c, phases.test)):
        update_phase(rec, warm, train, optimizers, config, rng)
        results[name] = evaluate_set(rec, warm, test)
    log.info("%s seed %d: %s", method, seed, " ".join(f"{p}={results[p]:.4f}" for p in PHASES))
    return MetricReport(method, seed, base_model_kind, results,
                        meta={"n_new_items": int(len(phases.new_items)),
                              "n_old_items": int(len(phases.old_items))})


def ablation_suite(phases, config=None, seeds=(0,), base_model_kind=None, methods=METHODS,
                   workers=None):
    """All ablation variants per seed; variants of one seed share the pretrained model."""
    config = config or ExperimentConfig()
    kind = base_model_kind or config.base_model
    jobs = [(kind, tuple(methods), phases, config, s) for s in seeds]
    reports = []
    for seed_reports in map_seeds(_ablation_one_seed, jobs, workers):
        reports.extend(seed_reports)
    return reports


def _ablation_one_seed(job):
    kind, methods, phases, config, seed = job
    rec = pretrain_base(kind, phases, config, seed)
    reps = [run_protocol(kind, m, phases, config, seed, pretrained=rec) for m in methods]
    base = [r for r in reps if r.method == "base"]
    return attach_relaimpr(reps, base)


def worker_count(n_jobs, workers=None):
    if workers is None:
        env = os.environ.get("MWUF_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(workers, n_jobs))


def map_seeds(fn, jobs, workers=None):
    """Run independent seeded jobs, in parallel processes when more than one worker is allowed."""
    n = worker_count(len(jobs), workers)
    if n == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))
