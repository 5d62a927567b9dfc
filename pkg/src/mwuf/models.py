"""Base recommendation models: a Wide & Deep style network and a factorization machine.

Both consume the same embedding sets and take the item ID embedding as an
explicit argument, so callers can substitute cold or warmed-up vectors.
"""
from __future__ import annotations

import copy
import hashlib
import logging

import numpy as np

from .features import EmbeddingLayer
from .numerics import (MLP, Adam, DimensionError, Tensor, binary_cross_entropy, concat,
                       matmul, mul, parameter, reshape, sigmoid)

log = logging.getLogger(__name__)


class ContractError(RuntimeError):
    """A frozen/unfrozen precondition was violated."""


class BaseModel:
    kind = "base"

    def __init__(self, schema):
        self.schema = schema
        self.frozen = False

    def parameters(self):
        raise NotImplementedError

    def logit(self, item_emb, item_feats, user_emb, user_feats):
        raise NotImplementedError

    def forward(self, item_emb, item_feats, user_emb, user_feats):
        """Predicted click probability, shape (B,)."""
        self._check(item_emb, item_feats, user_emb, user_feats)
        return sigmoid(self.logit(item_emb, item_feats, user_emb, user_feats))

    __call__ = forward

    def _check(self, item_emb, item_feats, user_emb, user_feats):
        k = self.schema.k
        if len(item_feats) != self.schema.n or len(user_feats) != self.schema.m:
            raise DimensionError(
                f"expected {self.schema.n} item and {self.schema.m} user feature embeddings, "
                f"got {len(item_feats)} and {len(user_feats)}")
        batch = item_emb.shape[0] if item_emb.ndim == 2 else None
        for t in (item_emb, user_emb, *item_feats, *user_feats):
            if t.ndim != 2 or t.shape[1] != k or t.shape[0] != batch:
                raise DimensionError(f"embedding of shape {t.shape}, expected ({batch}, {k})")


class WideDeepModel(BaseModel):
    """Deep ReLU tower plus a linear (wide) channel over the same concatenated embeddings."""

    kind = "wide_deep"

    def __init__(self, schema, rng, hidden=64, depth=3):
        super().__init__(schema)
        width = (2 + schema.n + schema.m) * schema.k
        self.deep = MLP([width] + [hidden] * depth + [1], rng, name="model.deep")
        self.wide = parameter(np.zeros((width, 1)), name="model.wide")

    def parameters(self):
        params = self.deep.parameters()
        params[self.wide.name] = self.wide
        return params

    def logit(self, item_emb, item_feats, user_emb, user_feats):
        x = concat([item_emb, *item_feats, user_emb, *user_feats], axis=-1)
        z = self.deep(x) + matmul(x, self.wide)
        return reshape(z, (x.shape[0],))


class FMModel(BaseModel):
    """Factorization machine; one vector per field serves both the linear and pairwise terms."""

    kind = "fm"

    def __init__(self, schema, rng, **_):
        super().__init__(schema)
        k = schema.k
        self.linear = parameter(rng.uniform(-np.sqrt(3.0 / k), np.sqrt(3.0 / k), size=(k, 1)),
                                name="model.linear")
        self.bias = parameter(np.zeros(1), name="model.bias")

    def parameters(self):
        return {self.linear.name: self.linear, self.bias.name: self.bias}

    def logit(self, item_emb, item_feats, user_emb, user_feats):
        fields = [item_emb, *item_feats, user_emb, *user_feats]
        total = fields[0]
        squares = mul(fields[0], fields[0])
        for e in fields[1:]:
            total = total + e
            squares = squares + mul(e, e)
        pairwise = 0.5 * (mul(total, total) - squares).sum(axis=1)
        first = reshape(matmul(total, self.linear), (total.shape[0],))
        return first + pairwise + self.bias


MODEL_KINDS = {"wide_deep": WideDeepModel, "fm": FMModel}


def make_model(kind, schema, rng, hidden=64):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown base model {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(schema, rng, hidden=hidden)


class Recommender:
    """Embedding layer (phi) plus base model (theta)."""

    def __init__(self, embeddings, model):
        self.embeddings = embeddings
        self.model = model

    @classmethod
    def create(cls, schema, kind, rng, hidden=64, init_std=0.1):
        return cls(EmbeddingLayer(schema, rng, init_std=init_std),
                   make_model(kind, schema, rng, hidden=hidden))

    @property
    def schema(self):
        return self.embeddings.schema

    @property
    def frozen(self):
        return self.model.frozen

    def parameters(self):
        params = dict(self.embeddings.parameters())
        params.update(self.model.parameters())
        return params

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        self.model.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters().values():
            p.requires_grad = True
        self.model.frozen = False
        return self

    def forward(self, batch, item_emb=None):
        v, xv, u, xu = self.embeddings.embed(batch)
        return self.model(v if item_emb is None else item_emb, xv, u, xu)

    def predict(self, batch, item_emb=None):
        return self.forward(batch, item_emb).data.copy()

    def state(self):
        """Parameter arrays by name (copies)."""
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def checksum(self):
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def clone(self):
        return copy.deepcopy(self)


def minibatches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def pretrain(rec, dataset, epochs=1, batch_size=256, lr=1e-3, rng=None):
    """Train theta and phi with Adam on log-loss over shuffled mini-batches.

    Returns the mean training loss of each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if rec.frozen:
        raise ContractError("pretrain needs an unfrozen model")
    rng = rng or np.random.default_rng(0)
    opt = Adam(rec.parameters().values(), lr=lr)
    history = []
    for epoch in range(epochs):
        total, seen = 0.0, 0
        for idx in minibatches(len(dataset), batch_size, rng):
            batch = dataset.take(idx)
            opt.zero_grad()
            loss = binary_cross_entropy(rec.forward(batch), batch.label)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("pretrain epoch %d: loss %.5f", epoch + 1, history[-1])
    return history


def predict_in_batches(rec, dataset, batch_size=4096, item_emb_fn=None):
    """Scores for a whole dataset; ``item_emb_fn(batch)`` may supply item embeddings."""
    out = np.empty(len(dataset), dtype=np.float64)
    for idx in minibatches(len(dataset), batch_size):
        batch = dataset.take(idx)
        emb = item_emb_fn(batch) if item_emb_fn is not None else None
        out[idx] = rec.predict(batch, emb)
    return out

