"""Warm-up of cold item ID embeddings.

A cold embedding ``v`` is turned into ``v * scale + shift``. The scale comes
from an MLP over the item's feature embeddings; the shift from an MLP over
the mean embedding of users who already interacted with the item. Training
alternates two losses per batch: the cold loss updates only the new item ID
table, the warm loss updates only the two meta networks. The pretrained
model is never touched.
"""
from __future__ import annotations

import logging
from collections import OrderedDict

import numpy as np

from .models import ContractError
from .numerics import (MLP, Adam, DimensionError, Tensor, binary_cross_entropy, concat,
                       gather, mul, parameter)

log = logging.getLogger(__name__)

DEFAULT_USER_CAP = 100
MODES = ("full", "scale", "shift", "none")


def common_init(item_table, rows=None):
    """Coordinate-wise mean of the pretrained item embeddings (optionally a row subset)."""
    table = np.asarray(item_table.data if isinstance(item_table, Tensor) else item_table)
    if rows is not None:
        table = table[np.asarray(rows, dtype=np.int64)]
    if table.shape[0] == 0:
        raise ValueError("cannot average an empty item table")
    return table.astype(np.float64).mean(axis=0).astype(table.dtype)


class MetaScalingNet:
    """Item feature embeddings (n*k) -> per-item scale vector (k).

    The output layer starts at zero and a constant 1 is added, so a fresh
    net is the identity transform.
    """

    def __init__(self, n, k, rng, hidden=16):
        if n < 1:
            raise DimensionError("the scaling network needs at least one item feature")
        self.n, self.k = n, k
        self.mlp = MLP([n * k, hidden, k], rng, name="meta.scale", zero_last=True)

    def parameters(self):
        return self.mlp.parameters()

    def __call__(self, item_features):
        if item_features.ndim != 2 or item_features.shape[1] != self.n * self.k:
            raise DimensionError(
                f"scaling net expects (B, {self.n * self.k}) features, got {item_features.shape}")
        return self.mlp(item_features) + 1.0


class MetaShiftingNet:
    """Aggregated interacted-user embedding (k) -> per-item shift vector (k)."""

    def __init__(self, k, rng, hidden=16):
        self.k = k
        self.mlp = MLP([k, hidden, k], rng, name="meta.shift", zero_last=True)

    def parameters(self):
        return self.mlp.parameters()

    def __call__(self, aggregate, nonempty=None):
        if aggregate.ndim != 2 or aggregate.shape[1] != self.k:
            raise DimensionError(f"shifting net expects (B, {self.k}), got {aggregate.shape}")
        out = self.mlp(aggregate)
        if nonempty is not None:
            # no interacted users: shift is exactly zero
            out = mul(out, Tensor(np.asarray(nonempty, dtype=out.data.dtype)[:, None]))
        return out


def scale_forward(item_features, net):
    """Scale vectors from a list of n item feature embeddings (each (B, k))."""
    if len(item_features) != net.n:
        raise DimensionError(f"expected {net.n} item feature embeddings, got {len(item_features)}")
    return net(concat(item_features, axis=-1))


def shift_forward(aggregate, net, empty=False):
    """Shift vector for one aggregate; empty user sets give zeros without running the net."""
    aggregate = np.asarray(aggregate)
    if aggregate.shape[-1] != net.k:
        raise DimensionError(f"aggregate has length {aggregate.shape[-1]}, expected {net.k}")
    if empty:
        return Tensor(np.zeros(aggregate.shape, dtype=net.mlp.layers[0].weight.data.dtype))
    batch = Tensor(aggregate.reshape(1, -1), dtype=net.mlp.layers[0].weight.data.dtype.type)
    return Tensor(net(batch).data.reshape(aggregate.shape))


def warm_embedding(cold, scale, shift):
    """``cold * scale + shift``, all of length k."""
    cold, scale, shift = (x if isinstance(x, Tensor) else Tensor(x) for x in (cold, scale, shift))
    if not (cold.shape == scale.shape == shift.shape):
        raise DimensionError(f"shapes {cold.shape}, {scale.shape}, {shift.shape} differ")
    return mul(cold, scale) + shift


def aggregate_users(users, user_table, cap=DEFAULT_USER_CAP):
    """Mean pretrained embedding of the ``cap`` most recent users; ``(vector, empty)``."""
    table = user_table.data if isinstance(user_table, Tensor) else np.asarray(user_table)
    users = list(users)
    if not users:
        return np.zeros(table.shape[1], dtype=table.dtype), True
    recent = np.asarray(users[-cap:], dtype=np.int64)
    return table[recent].astype(np.float64).mean(axis=0).astype(table.dtype), False


class InteractionLog:
    """Per item, the users that interacted with it, in first-interaction order."""

    def __init__(self, cap=DEFAULT_USER_CAP):
        self.cap = cap
        self._users = {}
        self._cache = {}

    def __len__(self):
        return len(self._users)

    def users(self, item):
        return list(self._users.get(int(item), ()))

    def count(self, item):
        return len(self._users.get(int(item), ()))

    def add(self, items, users):
        for v, u in zip(np.asarray(items).tolist(), np.asarray(users).tolist()):
            seen = self._users.setdefault(v, OrderedDict())
            if u not in seen:
                seen[u] = None
                self._cache.pop(v, None)

    def invalidate(self):
        """Drop cached aggregates (needed when the user table changes)."""
        self._cache.clear()

    def snapshot(self):
        out = InteractionLog(self.cap)
        out._users = {v: OrderedDict(us) for v, us in self._users.items()}
        return out

    def aggregate(self, items, user_table):
        """Stacked aggregates for a batch of items plus a non-empty mask."""
        table = user_table.data if isinstance(user_table, Tensor) else np.asarray(user_table)
        items = np.asarray(items, dtype=np.int64)
        out = np.zeros((len(items), table.shape[1]), dtype=table.dtype)
        nonempty = np.zeros(len(items), dtype=bool)
        for v in np.unique(items):
            v = int(v)
            if v not in self._cache:
                self._cache[v] = aggregate_users(self._users.get(v, ()), table, self.cap)
            vec, empty = self._cache[v]
            if not empty:
                mask = items == v
                out[mask] = vec
                nonempty[mask] = True
        return out, nonempty


class ColdEmbeddingLayer:
    """Fresh item ID table; every row starts at the common initial vector."""

    def __init__(self, n_items, init_vector):
        init_vector = np.asarray(init_vector)
        self.init_vector = init_vector.copy()
        self.table = parameter(np.tile(init_vector, (n_items, 1)), name="cold.item_id", sparse=True)

    def reset_rows(self, rows):
        self.table.data[np.asarray(rows, dtype=np.int64)] = self.init_vector

    def __call__(self, items):
        return gather(self.table, items)

    def parameters(self):
        return {self.table.name: self.table}


class MetaWarmUp:
    """Cold layer, both meta networks and the interaction log for one base model.

    ``mode`` selects the ablation: 'full', 'scale' (shift fixed at 0),
    'shift' (scale fixed at 1) or 'none' (common init only).
    """

    def __init__(self, schema, init_vector, rng, hidden=16, cap=DEFAULT_USER_CAP, mode="full"):
        if mode not in MODES:
            raise ValueError(f"unknown warm-up mode {mode!r}")
        self.schema = schema
        self.mode = mode
        self.cold = ColdEmbeddingLayer(schema.n_items, init_vector)
        self.scale_net = MetaScalingNet(schema.n, schema.k, rng, hidden)
        self.shift_net = MetaShiftingNet(schema.k, rng, hidden)
        self.log = InteractionLog(cap)

    def meta_parameters(self):
        params = {}
        if self.mode in ("full", "scale"):
            params.update(self.scale_net.parameters())
        if self.mode in ("full", "shift"):
            params.update(self.shift_net.parameters())
        return params

    def parameters(self):
        params = dict(self.cold.parameters())
        params.update(self.scale_net.parameters())
        params.update(self.shift_net.parameters())
        return params

    def transforms(self, rec, batch, item_feats=None):
        """Scale and shift tensors for a batch, each (B, k)."""
        if item_feats is None:
            _, item_feats, _, _ = rec.embeddings.embed(batch)
        ones = Tensor(np.ones((len(batch), self.schema.k), dtype=self.cold.table.data.dtype))
        zeros = Tensor(np.zeros((len(batch), self.schema.k), dtype=self.cold.table.data.dtype))
        scale = scale_forward(item_feats, self.scale_net) if self.mode in ("full", "scale") else ones
        if self.mode in ("full", "shift"):
            agg, nonempty = self.log.aggregate(batch.item_id, rec.embeddings.user_table)
            shift = self.shift_net(Tensor(agg, dtype=agg.dtype.type), nonempty)
        else:
            shift = zeros
        return scale, shift

    def warm_item_embedding(self, rec, batch, item_feats=None):
        """Warm embeddings with the cold vectors treated as constants."""
        cold = self.cold(batch.item_id).detach()
        scale, shift = self.transforms(rec, batch, item_feats)
        return warm_embedding(cold, scale, shift)

    def make_optimizers(self, lr=1e-3, meta_lr=None):
        cold_opt = Adam(self.cold.parameters().values(), lr=lr)
        meta_params = list(self.meta_parameters().values())
        meta_opt = Adam(meta_params, lr=lr if meta_lr is None else meta_lr)
        return cold_opt, meta_opt

    def train_step(self, rec, batch, cold_opt, meta_opt, base_opt=None):
        """One batch of the two-loss update; returns ``(cold_loss, warm_loss)``.

        ``base_opt`` enables the online variant where the base model also
        learns from the cold loss; by default the base model must be frozen.
        """
        if base_opt is None and not rec.frozen:
            raise ContractError("the base model must be frozen during warm-up training")
        v, xv, u, xu = rec.embeddings.embed(batch)

        cold_opt.zero_grad()
        if base_opt is not None:
            base_opt.zero_grad()
        y_cold = rec.model(self.cold(batch.item_id), xv, u, xu)
        loss_cold = binary_cross_entropy(y_cold, batch.label)
        loss_cold.backward()
        cold_opt.step()
        if base_opt is not None:
            base_opt.step()
            self.log.invalidate()
            v, xv, u, xu = rec.embeddings.embed(batch)

        if self.mode == "none":
            # no meta networks: the warm embedding is the cold one
            self.log.add(batch.item_id, batch.user_id)
            return loss_cold.item(), loss_cold.item()

        meta_opt.zero_grad()
        if base_opt is not None:
            base_opt.zero_grad()
        warm = self.warm_item_embedding(rec, batch, xv)
        y_warm = rec.model(warm, xv, u, xu)
        loss_warm = binary_cross_entropy(y_warm, batch.label)
        loss_warm.backward()
        meta_opt.step()

        self.log.add(batch.item_id, batch.user_id)
        return loss_cold.item(), loss_warm.item()

    def predict(self, rec, batch, hot=None):
        """Scores using warm embeddings; rows flagged ``hot`` use the pretrained embedding."""
        v, xv, u, xu = rec.embeddings.embed(batch)
        warm = self.warm_item_embedding(rec, batch, xv)
        if hot is not None and np.any(hot):
            hot = np.asarray(hot, dtype=bool)[:, None]
            warm = Tensor(np.where(hot, v.data, warm.data), dtype=warm.data.dtype.type)
        return rec.model(warm, xv, u, xu).data.copy()


def warm_predict(sample, rec, warmup, item_counts=None, hot_threshold=None):
    """Score one sample; items with at least ``hot_threshold`` interactions bypass the warm-up."""
    from .features import EncodedDataset
    batch = EncodedDataset.from_samples(rec.schema, [sample])
    hot = None
    if item_counts is not None and hot_threshold is not None:
        hot = np.asarray([item_counts[sample.item_id] >= hot_threshold])
    return float(warmup.predict(rec, batch, hot)[0])


def train_meta(rec, warmup, dataset, epochs=1, batch_size=256, lr=1e-3, meta_lr=None,
               optimizers=None, base_opt=None):
    """Run warm-up training over ``dataset`` in timestamp order; returns per-epoch mean losses."""
    if len(dataset) == 0:
        raise ValueError("cannot train the meta networks on an empty dataset")
    cold_opt, meta_opt = optimizers or warmup.make_optimizers(lr, meta_lr)
    order = dataset.time_order()
    history = []
    for epoch in range(epochs):
        lc = lw = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            c, w = warmup.train_step(rec, dataset.take(idx), cold_opt, meta_opt, base_opt)
            lc += c * len(idx)
            lw += w * len(idx)
        history.append((lc / len(order), lw / len(order)))
        log.info("warm-up epoch %d: cold %.5f warm %.5f", epoch + 1, *history[-1])
    return history
