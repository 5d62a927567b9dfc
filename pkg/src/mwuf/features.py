"""Feature schemas, vocabularies, encoded datasets and embedding tables."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .numerics import LookupError_, Tensor, concat, gather, matmul, mul, parameter, reshape

USER, ITEM = "user", "item"
CATEGORICAL, CONTINUOUS = "categorical", "continuous"
UNK = "<unk>"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureField:
    name: str
    side: str
    kind: str = CATEGORICAL
    vocab_size: int | None = None
    multi_valued: bool = False
    is_id: bool = False
    max_vocab: int | None = None

    def __post_init__(self):
        if self.side not in (USER, ITEM):
            raise SchemaError(f"field {self.name!r}: side must be 'user' or 'item'")
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise SchemaError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS and (self.multi_valued or self.is_id):
            raise SchemaError(f"field {self.name!r}: continuous fields cannot be IDs or multi-valued")

    @property
    def categorical(self):
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple
    k: int = 16

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if self.k <= 0:
            raise SchemaError("embedding dimension k must be positive")
        names = [f.name for f in self.fields]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise SchemaError(f"duplicate field names: {sorted(dup)}")
        for side in (ITEM, USER):
            ids = [f for f in self.fields if f.side == side and f.is_id]
            if len(ids) != 1:
                raise SchemaError(f"schema needs exactly one {side} ID field, found {len(ids)}")
            if ids[0].multi_valued:
                raise SchemaError(f"{side} ID field cannot be multi-valued")

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise SchemaError(f"no field named {name!r}")

    @property
    def item_id(self):
        return next(f for f in self.fields if f.side == ITEM and f.is_id)

    @property
    def user_id(self):
        return next(f for f in self.fields if f.side == USER and f.is_id)

    @property
    def item_features(self):
        return [f for f in self.fields if f.side == ITEM and not f.is_id]

    @property
    def user_features(self):
        return [f for f in self.fields if f.side == USER and not f.is_id]

    @property
    def n(self):
        return len(self.item_features)

    @property
    def m(self):
        return len(self.user_features)

    @property
    def n_items(self):
        return self.item_id.vocab_size

    @property
    def n_users(self):
        return self.user_id.vocab_size

    def with_vocab_sizes(self, sizes):
        fields = tuple(replace(f, vocab_size=sizes[f.name]) if f.name in sizes else f
                       for f in self.fields)
        return replace(self, fields=fields)

    def to_dict(self):
        return {"k": self.k, "fields": [f.__dict__.copy() for f in self.fields]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(FeatureField(**f) for f in d["fields"]), k=d["k"])


class Vocab:
    """Dense index map for one categorical field; the last index is ``<unk>``."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk = len(self.tokens)

    def __len__(self):
        return len(self.tokens) + 1

    def __getitem__(self, token):
        if token is None:
            return self.unk
        return self.index.get(str(token), self.unk)

    def as_dict(self):
        d = dict(self.index)
        d[UNK] = self.unk
        return d


@dataclass
class EncodedSample:
    item_id: int
    item_features: dict
    user_id: int
    user_features: dict
    label: int
    timestamp: int


def _tokens(value):
    if value is None:
        return []
    if isinstance(value, str):
        return [t for t in value.split("|") if t]
    return [str(t) for t in value]


def build_vocab(rows, schema, normalize_continuous=False):
    """Fit one vocabulary per categorical field over ``rows`` (dicts keyed by field name)."""
    rows = list(rows)
    counts = {f.name: Counter() for f in schema.fields if f.categorical}
    order = {f.name: {} for f in schema.fields if f.categorical}
    ranges = {}
    for i, row in enumerate(rows):
        for f in schema.fields:
            if f.name not in row:
                raise SchemaError(f"row {i} is missing column {f.name!r}")
            value = row[f.name]
            if f.categorical:
                if value is None:
                    continue
                toks = _tokens(value) if f.multi_valued else [str(value)]
                for t in toks:
                    counts[f.name][t] += 1
                    order[f.name].setdefault(t, len(order[f.name]))
            else:
                x = float(value)
                lo, hi = ranges.get(f.name, (x, x))
                ranges[f.name] = (min(lo, x), max(hi, x))
    maps = {}
    for f in schema.fields:
        if not f.categorical:
            continue
        tokens = sorted(order[f.name], key=order[f.name].get)
        if f.max_vocab is not None and len(tokens) > f.max_vocab:
            keep = sorted(tokens, key=lambda t: (-counts[f.name][t], order[f.name][t]))[:f.max_vocab]
            keep = set(keep)
            tokens = [t for t in tokens if t in keep]
        maps[f.name] = Vocab(tokens)
    fitted = schema.with_vocab_sizes({name: len(v) for name, v in maps.items()})
    return Vocabulary(fitted, maps, ranges if normalize_continuous else {})


class Vocabulary:
    """A fitted schema plus the index maps that encode raw rows against it."""

    def __init__(self, schema, maps, ranges=None):
        self.schema = schema
        self.maps = maps
        self.ranges = ranges or {}

    def _continuous(self, name, value):
        x = float(value)
        if name in self.ranges:
            lo, hi = self.ranges[name]
            x = (x - lo) / (hi - lo) if hi > lo else 0.0
        return x

    def encode_row(self, row):
        feats = {}
        for f in self.schema.fields:
            if f.is_id:
                continue
            value = row[f.name]
            if not f.categorical:
                feats[f.name] = self._continuous(f.name, value)
            elif f.multi_valued:
                feats[f.name] = tuple(self.maps[f.name][t] for t in _tokens(value))
            else:
                feats[f.name] = self.maps[f.name][value]
        label = int(row["label"])
        if label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {row['label']!r}")
        return EncodedSample(
            item_id=self.maps[self.schema.item_id.name][row[self.schema.item_id.name]],
            item_features={f.name: feats[f.name] for f in self.schema.item_features},
            user_id=self.maps[self.schema.user_id.name][row[self.schema.user_id.name]],
            user_features={f.name: feats[f.name] for f in self.schema.user_features},
            label=label,
            timestamp=int(row["timestamp"]),
        )

    def encode(self, rows):
        return EncodedDataset.from_samples(self.schema, [self.encode_row(r) for r in rows])


class EncodedDataset:
    """Column-major store of encoded samples.

    Categorical columns are int64 vectors, multi-valued columns are int64
    matrices padded with -1, continuous columns are float64 vectors.
    """

    def __init__(self, schema, item_id, user_id, label, timestamp, columns):
        self.schema = schema
        self.item_id = np.asarray(item_id, dtype=np.int64)
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int8)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.columns = columns
        n = len(self.item_id)
        for arr in (self.user_id, self.label, self.timestamp, *columns.values()):
            if len(arr) != n:
                raise SchemaError("encoded columns have different lengths")

    @classmethod
    def from_samples(cls, schema, samples):
        cols = {}
        for f in schema.item_features + schema.user_features:
            side = "item_features" if f.side == ITEM else "user_features"
            values = [getattr(s, side)[f.name] for s in samples]
            if not f.categorical:
                cols[f.name] = np.asarray(values, dtype=np.float64)
            elif f.multi_valued:
                width = max([len(v) for v in values] + [1])
                mat = np.full((len(values), width), -1, dtype=np.int64)
                for i, v in enumerate(values):
                    mat[i, :len(v)] = v
                cols[f.name] = mat
            else:
                cols[f.name] = np.asarray(values, dtype=np.int64)
        return cls(schema,
                   [s.item_id for s in samples], [s.user_id for s in samples],
                   [s.label for s in samples], [s.timestamp for s in samples], cols)

    def __len__(self):
        return len(self.item_id)

    def __getitem__(self, i):
        def value(f):
            col = self.columns[f.name]
            if not f.categorical:
                return float(col[i])
            if f.multi_valued:
                return tuple(int(t) for t in col[i] if t >= 0)
            return int(col[i])

        return EncodedSample(
            item_id=int(self.item_id[i]),
            item_features={f.name: value(f) for f in self.schema.item_features},
            user_id=int(self.user_id[i]),
            user_features={f.name: value(f) for f in self.schema.user_features},
            label=int(self.label[i]),
            timestamp=int(self.timestamp[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return EncodedDataset(self.schema, self.item_id[index], self.user_id[index],
                              self.label[index], self.timestamp[index],
                              {k: v[index] for k, v in self.columns.items()})

    def time_order(self):
        """Row order sorted by timestamp; ties keep original row order."""
        return np.argsort(self.timestamp, kind="stable")

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        schema = parts[0].schema
        cols = {}
        for name, first in parts[0].columns.items():
            if first.ndim == 2:
                width = max(p.columns[name].shape[1] for p in parts)
                padded = [np.pad(p.columns[name], ((0, 0), (0, width - p.columns[name].shape[1])),
                                 constant_values=-1) for p in parts]
                cols[name] = np.concatenate(padded)
            else:
                cols[name] = np.concatenate([p.columns[name] for p in parts])
        return cls(schema,
                   np.concatenate([p.item_id for p in parts]),
                   np.concatenate([p.user_id for p in parts]),
                   np.concatenate([p.label for p in parts]),
                   np.concatenate([p.timestamp for p in parts]), cols)

    def item_counts(self, n_items=None):
        return np.bincount(self.item_id, minlength=n_items or self.schema.n_items or 0)


def multi_valued_pool(indices, table):
    """Unweighted mean of the rows of ``table`` at ``indices``.

    Returns ``(vector, empty)``; an empty set yields the zero vector with
    ``empty`` set.
    """
    indices = list(indices)
    if not indices:
        return Tensor(np.zeros(table.shape[1], dtype=table.data.dtype)), True
    pooled = _pool_padded(np.asarray([indices], dtype=np.int64), table)
    return reshape(pooled, (table.shape[1],)), False


def _pool_padded(mat, table):
    """Mean-pool each row of a -1 padded index matrix; empty rows give zeros."""
    b = mat.shape[0]
    valid = mat >= 0
    lengths = valid.sum(axis=1)
    rows, cols = np.nonzero(valid)
    tokens = mat[rows, cols]
    if tokens.size == 0:
        return Tensor(np.zeros((b, table.shape[1]), dtype=table.data.dtype))
    weights = np.zeros((b, tokens.size), dtype=table.data.dtype)
    weights[rows, np.arange(tokens.size)] = 1.0 / lengths[rows]
    return matmul(Tensor(weights, dtype=table.data.dtype.type), gather(table, tokens))


class EmbeddingLayer:
    """One table per field. Continuous fields own a single base vector."""

    def __init__(self, schema, rng, init_std=0.1):
        self.schema = schema
        self.tables = {}
        for f in schema.fields:
            if f.categorical and not f.vocab_size:
                raise SchemaError(f"field {f.name!r} has no vocabulary size; fit the schema first")
            rows = f.vocab_size if f.categorical else 1
            self.tables[f.name] = parameter(rng.normal(0.0, init_std, size=(rows, schema.k)),
                                            name=f"emb.{f.name}", sparse=True)

    def parameters(self):
        return {t.name: t for t in self.tables.values()}

    @property
    def item_table(self):
        return self.tables[self.schema.item_id.name]

    @property
    def user_table(self):
        return self.tables[self.schema.user_id.name]

    def embed_field(self, f, column):
        table = self.tables[f.name]
        if not f.categorical:
            base = gather(table, np.zeros(len(column), dtype=np.int64))
            return mul(base, Tensor(np.asarray(column).reshape(-1, 1), dtype=table.data.dtype.type))
        if f.multi_valued:
            return _pool_padded(column, table)
        return gather(table, column)

    def embed(self, batch):
        """Embeddings of a batch: ``(item_id, [item features], user_id, [user features])``."""
        s = self.schema
        try:
            return (
                gather(self.item_table, batch.item_id),
                [self.embed_field(f, batch.columns[f.name]) for f in s.item_features],
                gather(self.user_table, batch.user_id),
                [self.embed_field(f, batch.columns[f.name]) for f in s.user_features],
            )
        except LookupError_ as exc:
            raise LookupError_(f"{exc} (is the batch encoded with this schema?)") from None

    def item_feature_vector(self, batch):
        """Item feature embeddings concatenated in schema order, shape (B, n*k)."""
        feats = [self.embed_field(f, batch.columns[f.name]) for f in self.schema.item_features]
        return concat(feats, axis=-1)


def embed_sample(sample, layer):
    """Embed one sample; each output has a leading batch axis of one."""
    ds = EncodedDataset.from_samples(layer.schema, [sample])
    return layer.embed(ds)

