import numpy as np
import pytest

from mwuf.dataio import (CheckpointError, ParseError, SyntheticSpec, generate_synthetic,
                         load_checkpoint, load_dataset, load_delimited, load_movielens,
                         save_checkpoint, title_tokens, write_synthetic)
from mwuf.protocol import auc

USERS = "1::F::1::10::48067\n2::M::56::16::70072\n3::M::25::15::55117\n"
MOVIES = ("1::Toy Story (1995)::Animation|Children's|Comedy\n"
          "2::Jumanji (1995)::Adventure|Children's|Fantasy\n"
          "3::Caf\xe9 Society (2016)::Drama\n")
RATINGS = ("1::1::5::978300760\n2::1::3::978302109\n1::2::4::978301968\n"
           "3::3::1::978300275\n2::3::4::978824291\n9::1::5::978300000\n")


@pytest.fixture
def movielens_dir(tmp_path):
    for name, text in (("users.dat", USERS), ("movies.dat", MOVIES), ("ratings.dat", RATINGS)):
        (tmp_path / name).write_bytes(text.encode("latin-1"))
    return tmp_path


def test_title_tokens():
    assert title_tokens("City of Lost Children, The (1995)") == ["city", "of", "lost", "children", "the"]


def test_movielens_loading(movielens_dir):
    ds, vocab = load_movielens(movielens_dir, k=4)
    assert len(ds) == 6
    assert ds.label.tolist() == [1, 0, 1, 0, 1, 1]
    s = vocab.schema
    assert [f.name for f in s.item_features] == ["genres", "year"]
    assert [f.name for f in s.user_features] == ["gender", "age", "occupation"]
    assert s.n_items == 4 and s.n_users == 5
    genres = vocab.maps["genres"]
    assert ds[0].item_features["genres"] == (genres["Animation"], genres["Children's"], genres["Comedy"])
    # unknown user 9 still gets an ID; its side features are <unk>
    assert ds[5].user_features["gender"] == vocab.maps["gender"].unk
    ds_t, vocab_t = load_dataset(movielens_dir, k=4, include_titles=True)
    assert "caf\xe9" in vocab_t.maps["title"].index


def test_movielens_parse_errors(movielens_dir):
    (movielens_dir / "ratings.dat").write_text("1::1::5\n", encoding="latin-1")
    with pytest.raises(ParseError, match="ratings.dat:1"):
        load_movielens(movielens_dir)
    (movielens_dir / "ratings.dat").write_text("1::1::x::5\n", encoding="latin-1")
    with pytest.raises(ParseError):
        load_movielens(movielens_dir)


def test_load_dataset_needs_known_layout(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_synthetic_roundtrip_through_delimited_files(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_users=30, n_items=40, n_interactions=500, seed=1), k=4)
    write_synthetic(data, tmp_path)
    ds, vocab = load_delimited(tmp_path, k=4)
    assert len(ds) == 500
    assert ds.label.tolist() == data.dataset.label.tolist()
    assert sorted(np.bincount(ds.item_id).tolist()) == sorted(
        c for c in np.bincount(data.dataset.item_id).tolist() if c)
    assert [f.name for f in vocab.schema.item_features] == ["item_f0", "item_f1"]


def test_delimited_parse_error(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_users=5, n_items=5, n_interactions=20), k=2)
    write_synthetic(data, tmp_path)
    with open(tmp_path / "interactions.csv", "a", encoding="utf-8") as fh:
        fh.write("1,2,3\n")
    with pytest.raises(ParseError):
        load_delimited(tmp_path)


def test_synthetic_statistics():
    data = generate_synthetic(SyntheticSpec(seed=0))
    ds = data.dataset
    z = data.true_logits()
    clean = data.extras["clean_labels"]
    assert auc(z, clean) > 0.9
    assert 0.75 < auc(z, ds.label) < auc(z, clean)
    # flip rate within four binomial standard deviations of 0.1
    assert abs(data.extras["flipped"].mean() - 0.1) < 4 * np.sqrt(0.09 / len(ds))
    counts = np.sort(np.bincount(ds.item_id, minlength=2000))[::-1][:200]
    slope = np.polyfit(np.log(np.arange(1, 201)), np.log(counts), 1)[0]
    assert abs(slope + 1.0) < 0.1
    assert np.all(np.diff(ds.timestamp) >= 0)


def test_synthetic_is_seeded_and_noise_free_option():
    a = generate_synthetic(SyntheticSpec(n_interactions=2000, seed=4))
    b = generate_synthetic(SyntheticSpec(n_interactions=2000, seed=4))
    assert np.array_equal(a.dataset.label, b.dataset.label)
    assert np.array_equal(a.dataset.user_id, b.dataset.user_id)
    clean = generate_synthetic(SyntheticSpec(n_interactions=2000, noise_rate=0.0))
    assert np.array_equal(clean.dataset.label, clean.extras["clean_labels"])
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(noise_rate=1.5))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"emb.item": rng.normal(size=(5, 3)).astype(np.float32),
              "model.bias": np.zeros(1, dtype=np.float32),
              "scalar": np.float32(2.5).reshape(())}
    path = tmp_path / "x.ckpt"
    save_checkpoint(params, path)
    out = load_checkpoint(path)
    assert list(out) == list(params)
    for k in params:
        assert out[k].tobytes() == params[k].tobytes() and out[k].shape == params[k].shape
    save_checkpoint(out, tmp_path / "y.ckpt")
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_corruption_detected(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    save_checkpoint({"w": rng.normal(size=(4, 4)).astype(np.float32)}, path)
    blob = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-20])
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    (tmp_path / "junk.ckpt").write_bytes(b"hello world")
    for name in ("trunc", "flip", "junk"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.ckpt")
