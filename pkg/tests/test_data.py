import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consolidate import data
from consolidate.exceptions import BadMagicError, CountMismatchError, TruncatedFileError

from conftest import needs_mnist, DATA_DIR


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


@pytest.fixture
def tiny_corpus(tmp_path):
    rng = np.random.default_rng(0)
    for corpus in data.CORPORA:
        d = tmp_path / corpus
        d.mkdir()
        for split, n in (("train", 30), ("test", 10)):
            img, lab = data.IDX_FILES[split]
            write_idx(d / img, rng.integers(0, 256, (n, 28, 28)), data.IMAGES_MAGIC)
            write_idx(d / lab, np.arange(n) % 10, data.LABELS_MAGIC)
    yield tmp_path
    data._CACHE.clear()


def test_load_idx_scales_and_keeps_labels(tmp_path):
    write_idx(tmp_path / "i", [[[0, 255], [51, 102]]], data.IMAGES_MAGIC)
    write_idx(tmp_path / "l", [9], data.LABELS_MAGIC)
    ds = data.load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.images[0], [[0, 1], [0.2, 0.4]])
    assert ds.labels.tolist() == [9]


def test_load_idx_reads_gzip(tmp_path):
    write_idx(tmp_path / "i.gz", np.zeros((2, 28, 28)), data.IMAGES_MAGIC)
    write_idx(tmp_path / "l.gz", [1, 2], data.LABELS_MAGIC)
    assert len(data.load_idx(tmp_path / "i.gz", tmp_path / "l.gz")) == 2


def test_bad_magic(tmp_path):
    write_idx(tmp_path / "i", np.zeros((1, 28, 28)), 0x00000000)
    with pytest.raises(BadMagicError):
        data.read_idx(tmp_path / "i", data.IMAGES_MAGIC)


def test_truncated_file(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 28, 28)), data.IMAGES_MAGIC)
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        data.read_idx(tmp_path / "i", data.IMAGES_MAGIC)
    (tmp_path / "i").write_bytes(raw[:6])
    with pytest.raises(TruncatedFileError):
        data.read_idx(tmp_path / "i", data.IMAGES_MAGIC)


def test_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 28, 28)), data.IMAGES_MAGIC)
    write_idx(tmp_path / "l", [1, 2], data.LABELS_MAGIC)
    with pytest.raises(CountMismatchError):
        data.load_idx(tmp_path / "i", tmp_path / "l")


def test_missing_files_and_actionable_error(tmp_path):
    missing = data.missing_files(tmp_path, ["mnist"])
    assert len(missing) == 4
    assert any("train-images-idx3-ubyte" in str(p) for p in missing)
    with pytest.raises(FileNotFoundError, match="train-images-idx3-ubyte"):
        data.load_corpus("mnist", "train", tmp_path)


def test_env_var_sets_root(tiny_corpus, monkeypatch):
    monkeypatch.setenv("CONSOLIDATE_DATA_DIR", str(tiny_corpus))
    assert data.data_root() == tiny_corpus
    assert len(data.load_corpus("fashion", "test")) == 10


def test_validate_corpus(tiny_corpus):
    assert data.validate_corpus("mnist", "train", tiny_corpus) == 30


def test_fetch_data_from_file_mirror(tiny_corpus, tmp_path_factory):
    mirror = tmp_path_factory.mktemp("mirror")
    for corpus in data.CORPORA:
        (mirror / corpus).mkdir()
        for split in data.IDX_FILES:
            for fname in data.IDX_FILES[split]:
                raw = (tiny_corpus / corpus / fname).read_bytes()
                with gzip.open(mirror / corpus / (fname + ".gz"), "wb") as fh:
                    fh.write(raw)
    dest = tmp_path_factory.mktemp("dest")
    data.fetch_data(mirror.as_uri(), dest)
    assert not data.missing_files(dest)
    assert (dest / "mnist" / "train-images-idx3-ubyte").read_bytes() == (
        tiny_corpus / "mnist" / "train-images-idx3-ubyte"
    ).read_bytes()


def test_permuted_tasks_deterministic_and_distinct():
    a = data.make_permuted_tasks(42, 10)
    b = data.make_permuted_tasks(42, 10)
    assert a == b and len(a) == 10
    perms = {tuple(t.permutation) for t in a}
    assert len(perms) == 10
    for t in a:
        assert np.array_equal(np.sort(t.permutation), np.arange(784))


def test_first_identity_switch():
    seq = data.make_permuted_tasks(0, 3, first_identity=True)
    assert seq[0].transform == "identity" and seq[1].transform == "permutation"
    assert all(t.transform == "permutation" for t in data.make_permuted_tasks(0, 3))


def test_n_tasks_must_be_positive():
    with pytest.raises(ValueError):
        data.make_permuted_tasks(0, 0)


def test_permutation_then_inverse_restores():
    task = data.make_permuted_tasks(1, 1)[0]
    img = np.random.default_rng(0).random((2, 28, 28))
    out = task(img)
    inv = np.argsort(task.permutation)
    back = out.reshape(2, -1)[:, inv].reshape(2, 28, 28)
    assert np.array_equal(back, img)


def test_rotation_tasks_order():
    seq = data.make_rotation_tasks()
    assert len(seq) == 4 and seq.network_kind == "conv"
    assert [t.label() for t in seq] == ["mnist", "fashion", "mnist-rot90", "fashion-rot90"]


def test_rotation_convention_one_hot():
    for r, c in [(0, 0), (3, 7), (27, 1), (10, 27)]:
        img = np.zeros((1, 28, 28))
        img[0, c, 27 - r] = 1.0
        out = data.rotate90(img)
        assert out[0, r, c] == 1.0 and out.sum() == 1.0


def test_four_rotations_identity():
    img = np.random.default_rng(0).random((28, 28))
    assert np.array_equal(data.rotate90(img, 4), img)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["permutation", "rotate90"]))
def test_transforms_preserve_pixel_multiset(seed, kind):
    task = data.TaskSpec("mnist", kind, seed=seed, quarter_turns=1 if kind == "rotate90" else 0)
    img = np.random.default_rng(seed).random((1, 28, 28))
    out = task(img)
    assert out.shape == img.shape
    assert np.array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


def test_taskspec_validation():
    with pytest.raises(ValueError):
        data.TaskSpec("mnist", "permutation")
    with pytest.raises(ValueError):
        data.TaskSpec("mnist", "rotate90", quarter_turns=2)
    with pytest.raises(ValueError):
        data.make_sequence("nope")


def test_batches_count_order_and_labels(tiny_corpus):
    ds = data.load_corpus("mnist", "train", tiny_corpus)
    task = data.make_permuted_tasks(0, 1)[0]
    got = list(data.batches(ds, task, batch_size=7, shuffle_seed=3))
    assert [len(y) for _, y in got] == [7, 7, 7, 7, 2]
    again = list(data.batches(ds, task, batch_size=7, shuffle_seed=3))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(got, again))
    order = data.epoch_order(len(ds), 3, 0)
    x0, y0 = got[0]
    assert np.array_equal(y0, ds.labels[order[:7]])
    assert np.array_equal(x0, task(ds.images[order[:7]]))
    other_epoch = list(data.batches(ds, task, batch_size=7, shuffle_seed=3, epoch=1))
    assert not np.array_equal(other_epoch[0][1], y0) or not np.array_equal(other_epoch[0][0], x0)


def test_batch_size_must_be_positive(tiny_corpus):
    ds = data.load_corpus("mnist", "train", tiny_corpus)
    with pytest.raises(ValueError):
        next(data.batches(ds, batch_size=0))


def test_subset():
    ds = data.Dataset(np.zeros((10, 28, 28)), np.arange(10))
    assert data.Dataset.subset(ds, 3).labels.tolist() == [0, 1, 2]
    assert len(ds.subset(4, seed=1)) == 4
    assert ds.subset(None) is ds


@needs_mnist
@pytest.mark.parametrize("corpus", ["mnist", "fashion"])
def test_real_corpus_shapes(corpus):
    if data.missing_files(DATA_DIR, [corpus]):
        pytest.skip(f"{corpus} not available")
    train = data.load_corpus(corpus, "train", DATA_DIR)
    test = data.load_corpus(corpus, "test", DATA_DIR)
    assert train.images.shape == (60000, 28, 28) and len(test) == 10000
    assert train.images.min() >= 0 and train.images.max() <= 1
    assert set(np.unique(train.labels)) == set(range(10))
    # a 600-batch epoch
    assert sum(1 for _ in data.batches(train.subset(60000), batch_size=100)) == 600
