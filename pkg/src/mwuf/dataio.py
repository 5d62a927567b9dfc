"""Dataset ingestion, the planted synthetic generator, and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"MWUF1"
    repeated per parameter:
        uint32 name length, name bytes (utf-8)
        uint32 rank, rank x uint64 extents
        float32 payload (C order)
    uint64 checksum: first 8 bytes of BLAKE2b over all payload bytes
"""
from __future__ import annotations

import csv
import hashlib
import os
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import (CATEGORICAL, ITEM, USER, EncodedDataset, FeatureField, FeatureSchema,
                       build_vocab)

MAGIC = b"MWUF1"


class ParseError(ValueError):
    pass


class CheckpointError(IOError):
    pass


# ---------------------------------------------------------------- MovieLens

_YEAR = re.compile(r"\((\d{4})\)\s*$")
_PUNCT = re.compile(r"[^\w\s]")


def title_tokens(title):
    """Lower-cased title words with the trailing '(year)' and punctuation removed."""
    title = _YEAR.sub("", title)
    return _PUNCT.sub(" ", title.lower()).split()


def _read_dat(path, n_fields, encoding="latin-1"):
    with open(path, encoding=encoding) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                raise ParseError(f"{path}:{lineno}: expected {n_fields} '::' fields, got {len(parts)}")
            yield lineno, parts


def movielens_schema(k=16, include_titles=False, title_vocab=5000):
    fields = [
        FeatureField("movie_id", ITEM, is_id=True),
        FeatureField("genres", ITEM, multi_valued=True),
        FeatureField("year", ITEM),
    ]
    if include_titles:
        fields.append(FeatureField("title", ITEM, multi_valued=True, max_vocab=title_vocab))
    fields += [
        FeatureField("user_id", USER, is_id=True),
        FeatureField("gender", USER),
        FeatureField("age", USER),
        FeatureField("occupation", USER),
    ]
    return FeatureSchema(tuple(fields), k=k)


def movielens_rows(directory, include_titles=False):
    """Raw joined rows from a MovieLens-1M directory; ratings >= 4 become label 1."""
    directory = Path(directory)
    users, movies = {}, {}
    for lineno, (uid, gender, age, occ, _zip) in _read_dat(directory / "users.dat", 5):
        users[uid] = {"gender": gender, "age": age, "occupation": occ}
    for lineno, (mid, title, genres) in _read_dat(directory / "movies.dat", 3):
        m = _YEAR.search(title)
        movies[mid] = {"genres": genres.split("|") if genres else [],
                       "year": m.group(1) if m else None,
                       "title": title_tokens(title)}
    no_user = {"gender": None, "age": None, "occupation": None}
    no_movie = {"genres": [], "year": None, "title": []}
    rows = []
    for lineno, (uid, mid, rating, ts) in _read_dat(directory / "ratings.dat", 4):
        try:
            rating, ts = float(rating), int(ts)
        except ValueError:
            raise ParseError(f"{directory / 'ratings.dat'}:{lineno}: bad rating or timestamp") from None
        row = {"user_id": uid, "movie_id": mid, "label": int(rating >= 4), "timestamp": ts}
        row.update(users.get(uid, no_user))
        row.update(movies.get(mid, no_movie))
        if not include_titles:
            row.pop("title")
        rows.append(row)
    return rows


def load_movielens(directory, k=16, include_titles=False, title_vocab=5000):
    """Encode a MovieLens-1M directory; returns ``(dataset, vocabulary)``."""
    rows = movielens_rows(directory, include_titles)
    vocab = build_vocab(rows, movielens_schema(k, include_titles, title_vocab))
    return vocab.encode(rows), vocab


# ---------------------------------------------------------------- delimited files

def _read_table(path, delimiter):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            rows.append(dict(zip(header, rec)))
    return header, rows


def load_delimited(directory, k=16, delimiter=","):
    """Load ``interactions.csv``, ``items.csv`` and ``users.csv`` from ``directory``.

    Interactions carry ``user_id,item_id,label,timestamp``; side files are
    keyed by their ID column and every other column becomes a categorical
    feature ('|' inside a value marks a multi-valued field).
    """
    directory = Path(directory)
    _, inter = _read_table(directory / "interactions.csv", delimiter)
    item_cols, items = _read_table(directory / "items.csv", delimiter)
    user_cols, users = _read_table(directory / "users.csv", delimiter)
    items = {r["item_id"]: r for r in items}
    users = {r["user_id"]: r for r in users}

    def fields_for(cols, table, side, id_name):
        out = [FeatureField(id_name, side, is_id=True)]
        for c in cols:
            if c == id_name:
                continue
            multi = any("|" in r[c] for r in table.values())
            out.append(FeatureField(c, side, CATEGORICAL, multi_valued=multi))
        return out

    schema = FeatureSchema(tuple(fields_for(item_cols, items, ITEM, "item_id")
                                 + fields_for(user_cols, users, USER, "user_id")), k=k)
    rows = []
    for lineno, r in enumerate(inter, 2):
        try:
            row = {"user_id": r["user_id"], "item_id": r["item_id"],
                   "label": int(float(r["label"])), "timestamp": int(r["timestamp"])}
        except (KeyError, ValueError):
            raise ParseError(f"{directory / 'interactions.csv'}:{lineno}: malformed row") from None
        side_i = items.get(r["item_id"], {})
        side_u = users.get(r["user_id"], {})
        for f in schema.item_features:
            row[f.name] = side_i.get(f.name)
        for f in schema.user_features:
            row[f.name] = side_u.get(f.name)
        rows.append(row)
    vocab = build_vocab(rows, schema)
    return vocab.encode(rows), vocab


def load_dataset(path, k=16, include_titles=False, title_vocab=5000):
    """Dispatch on directory contents: MovieLens ``*.dat`` files or delimited CSVs."""
    path = Path(path)
    if (path / "ratings.dat").exists():
        return load_movielens(path, k, include_titles, title_vocab)
    if (path / "interactions.csv").exists():
        return load_delimited(path, k)
    raise FileNotFoundError(f"{path}: neither ratings.dat nor interactions.csv found")


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    n_users: int = 1000
    n_items: int = 2000
    n_interactions: int = 100_000
    n_item_features: int = 2
    n_user_features: int = 2
    item_feature_cardinality: int = 20
    user_feature_cardinality: int = 8
    latent_dim: int = 8
    noise_rate: float = 0.1
    skew: float = 1.0
    id_noise: float = 0.7
    logit_scale: float = 4.0
    exposure_bias: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_items <= 0 or self.n_users <= 0 or self.n_interactions <= 0:
            raise ValueError("synthetic spec needs positive user, item and interaction counts")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.n_item_features < 1:
            raise ValueError("at least one item feature is required")


@dataclass
class SyntheticData:
    dataset: EncodedDataset
    spec: SyntheticSpec
    user_latent: np.ndarray
    item_latent: np.ndarray
    item_bias: np.ndarray
    item_features: np.ndarray
    user_features: np.ndarray
    extras: dict = field(default_factory=dict)

    def true_logits(self, ds=None):
        ds = ds or self.dataset
        d = self.spec.latent_dim
        dot = np.einsum("ij,ij->i", self.user_latent[ds.user_id], self.item_latent[ds.item_id])
        return self.spec.logit_scale * dot / np.sqrt(d) + self.item_bias[ds.item_id]


def synthetic_schema(spec, k=16):
    fields = [FeatureField("item_id", ITEM, is_id=True, vocab_size=spec.n_items + 1)]
    fields += [FeatureField(f"item_f{i}", ITEM, vocab_size=spec.item_feature_cardinality + 1)
               for i in range(spec.n_item_features)]
    fields += [FeatureField("user_id", USER, is_id=True, vocab_size=spec.n_users + 1)]
    fields += [FeatureField(f"user_f{i}", USER, vocab_size=spec.user_feature_cardinality + 1)
               for i in range(spec.n_user_features)]
    return FeatureSchema(tuple(fields), k=k)


def generate_synthetic(spec, k=16):
    """Interactions drawn from a planted logistic model over user/item latents.

    Item popularity follows a power law with exponent ``skew``. Latents are a
    sum of per-feature-value components plus an ID-specific residual, so item
    features are informative but do not determine the item. Users are
    exposed to items in proportion to ``exp(exposure_bias * affinity)``, and
    a ``noise_rate`` fraction of labels is flipped.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim

    def side_latents(count, n_feats, card):
        feats = rng.integers(0, card, size=(count, n_feats))
        comps = rng.normal(size=(n_feats, card, d))
        base = sum(comps[f][feats[:, f]] for f in range(n_feats)) / np.sqrt(max(n_feats, 1))
        bias_comps = rng.normal(size=(n_feats, card))
        bias = sum(bias_comps[f][feats[:, f]] for f in range(n_feats)) / np.sqrt(max(n_feats, 1))
        return feats, base + spec.id_noise * rng.normal(size=(count, d)), bias

    item_feats, item_z, item_b = side_latents(spec.n_items, spec.n_item_features,
                                              spec.item_feature_cardinality)
    if spec.n_user_features:
        user_feats, user_z, _ = side_latents(spec.n_users, spec.n_user_features,
                                             spec.user_feature_cardinality)
    else:
        user_feats = np.zeros((spec.n_users, 0), dtype=np.int64)
        user_z = rng.normal(size=(spec.n_users, d))
    item_b = 0.5 * item_b + 0.5 * spec.id_noise * rng.normal(size=spec.n_items)

    popularity = 1.0 / np.arange(1, spec.n_items + 1) ** spec.skew
    popularity = popularity[rng.permutation(spec.n_items)]
    counts = rng.multinomial(spec.n_interactions, popularity / popularity.sum())

    affinity = user_z @ item_z.T / np.sqrt(d)  # (users, items)
    items = np.repeat(np.arange(spec.n_items), counts)
    users = np.empty_like(items)
    pos = 0
    for v in np.flatnonzero(counts):
        w = spec.exposure_bias * affinity[:, v]
        p = np.exp(w - w.max())
        users[pos:pos + counts[v]] = rng.choice(spec.n_users, size=counts[v], p=p / p.sum())
        pos += counts[v]

    logits = spec.logit_scale * affinity[users, items] + item_b[items]
    clean = (rng.random(len(items)) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int8)
    flip = rng.random(len(items)) < spec.noise_rate
    labels = np.where(flip, 1 - clean, clean).astype(np.int8)
    timestamps = rng.integers(0, 10 * spec.n_interactions, size=len(items))

    order = np.argsort(timestamps, kind="stable")
    items, users, labels, timestamps = items[order], users[order], labels[order], timestamps[order]
    schema = synthetic_schema(spec, k)
    cols = {f"item_f{i}": item_feats[items, i].astype(np.int64) for i in range(spec.n_item_features)}
    cols.update({f"user_f{i}": user_feats[users, i].astype(np.int64)
                 for i in range(spec.n_user_features)})
    ds = EncodedDataset(schema, items, users, labels, timestamps, cols)
    return SyntheticData(ds, spec, user_z, item_z, item_b, item_feats, user_feats,
                         extras={"clean_labels": clean[order], "flipped": flip[order]})


def write_synthetic(data, directory):
    """Write a generated dataset as delimited files readable by :func:`load_delimited`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds = data.dataset
    with open(directory / "interactions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "label", "timestamp"])
        w.writerows(zip(ds.user_id.tolist(), ds.item_id.tolist(), ds.label.tolist(),
                        ds.timestamp.tolist()))
    with open(directory / "items.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id"] + [f"item_f{i}" for i in range(data.item_features.shape[1])])
        for v, feats in enumerate(data.item_features.tolist()):
            w.writerow([v] + feats)
    with open(directory / "users.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id"] + [f"user_f{i}" for i in range(data.user_features.shape[1])])
        for u, feats in enumerate(data.user_features.tolist()):
            w.writerow([u] + feats)
    np.savez(directory / "latents.npz", user_latent=data.user_latent,
             item_latent=data.item_latent, item_bias=data.item_bias)
    with open(directory / "spec.txt", "w", encoding="utf-8") as fh:
        for key, value in asdict(data.spec).items():
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------- checkpoints

def _checksum(chunks):
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return struct.unpack("<Q", h.digest())[0]


def save_checkpoint(params, path):
    """Write named arrays (or tensors) in the MWUF1 format."""
    out = [MAGIC]
    payloads = []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        payloads.append(payload)
        out.append(payload)
    out.append(struct.pack("<Q", _checksum(payloads)))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a MWUF1 checkpoint into an ordered dict of float32 arrays."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a MWUF1 checkpoint")
    end = len(blob) - 8
    pos = len(MAGIC)
    params, payloads = {}, []
    try:
        while pos < end:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > end:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            payload = blob[pos:pos + nbytes]
            pos += nbytes
            payloads.append(payload)
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != end:
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    (stored,) = struct.unpack_from("<Q", blob, end)
    if stored != _checksum(payloads):
        raise CheckpointError(f"{path}: checksum mismatch")
    return params
