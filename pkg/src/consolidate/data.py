"""MNIST/FashionMNIST ingestion and the task sequences built from them."""

from __future__ import annotations

import gzip
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import BadMagicError, CountMismatchError, TruncatedFileError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CORPORA = ("mnist", "fashion")
SEQUENCES = ("permuted-mnist-10", "rotated-mnist-fashion-4")

IMAGE_SIDE = 28


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, magic):
    """Read an IDX file with the given magic number into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedFileError(path, 8, len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(path, got, magic)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(path, header, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(path, header + size, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images in [0, 1] with shape (n, 28, 28) and integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(len(self.images), len(self.labels))

    def __len__(self):
        return len(self.labels)

    def subset(self, n, seed=None):
        """First ``n`` samples, or a seeded random subset when ``seed`` is given."""
        if n is None or n >= len(self):
            return self
        idx = np.arange(n) if seed is None else np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return Dataset(self.images[idx], self.labels[idx], self.split, self.name)


def load_idx(images_path, labels_path, split="train", name=""):
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(len(images), len(labels))
    scaled = images.astype(np.float64)
    scaled /= 255.0
    return Dataset(scaled, labels.astype(np.int64), split, name)


def data_root(root=None):
    if root is not None:
        return Path(root)
    return Path(os.environ.get("CONSOLIDATE_DATA_DIR", "data"))


def corpus_paths(corpus, split, root=None):
    base = data_root(root) / corpus
    paths = []
    for fname in IDX_FILES[split]:
        p = base / fname
        if not p.exists() and (base / (fname + ".gz")).exists():
            p = base / (fname + ".gz")
        paths.append(p)
    return tuple(paths)


def missing_files(root=None, corpora=CORPORA):
    out = []
    for corpus in corpora:
        for split in IDX_FILES:
            out += [p for p in corpus_paths(corpus, split, root) if not p.exists()]
    return out


_CACHE = {}


def load_corpus(corpus, split, root=None):
    """Load ``corpus`` ('mnist' or 'fashion') from ``<root>/<corpus>/``.

    Loaded datasets are cached per process; they are never mutated.
    """
    if corpus not in CORPORA:
        raise ValueError(f"unknown corpus {corpus!r}; expected one of {CORPORA}")
    images_path, labels_path = corpus_paths(corpus, split, root)
    key = (str(images_path), split)
    if key not in _CACHE:
        for p in (images_path, labels_path):
            if not p.exists():
                raise FileNotFoundError(
                    f"missing {p}; place the IDX files under {data_root(root)}/{corpus}/ "
                    "or run `consolidate fetch-data`"
                )
        _CACHE[key] = load_idx(images_path, labels_path, split, corpus)
    return _CACHE[key]


def fetch_data(mirror_url, root=None, corpora=CORPORA):
    """Download gzipped IDX files from ``<mirror_url>/<corpus>/<file>.gz`` and validate them."""
    root = data_root(root)
    for corpus in corpora:
        (root / corpus).mkdir(parents=True, exist_ok=True)
        for split, fnames in IDX_FILES.items():
            for fname in fnames:
                dest = root / corpus / fname
                if not dest.exists():
                    url = f"{mirror_url.rstrip('/')}/{corpus}/{fname}.gz"
                    tmp = dest.with_suffix(".gz")
                    with urllib.request.urlopen(url) as resp, open(tmp, "wb") as fh:
                        shutil.copyfileobj(resp, fh)
                    with gzip.open(tmp, "rb") as src, open(dest, "wb") as fh:
                        shutil.copyfileobj(src, fh)
                    tmp.unlink()
            validate_corpus(corpus, split, root)
    return root


def validate_corpus(corpus, split, root=None):
    """Check magic numbers, lengths and image/label agreement; returns the sample count."""
    images_path, labels_path = corpus_paths(corpus, split, root)
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(len(images), len(labels))
    return len(labels)


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------


def rotate90(images, quarter_turns=1):
    """Rotate (..., H, W) images counter-clockwise: dest[r, c] = src[c, W-1-r]."""
    return np.rot90(images, k=quarter_turns, axes=(-2, -1))


@dataclass(frozen=True)
class TaskSpec:
    """One task: a source corpus plus an input transform.

    ``transform`` is 'identity', 'permutation' (uses ``seed``) or 'rotate90'
    (uses ``quarter_turns``).
    """

    source: str = "mnist"
    transform: str = "identity"
    seed: int | None = None
    quarter_turns: int = 0
    task_id: int = 0

    def __post_init__(self):
        if self.transform not in ("identity", "permutation", "rotate90"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "permutation" and self.seed is None:
            raise ValueError("permutation task needs a seed")
        if self.quarter_turns not in (0, 1):
            raise ValueError("quarter_turns must be 0 or 1")

    @property
    def permutation(self):
        if self.transform != "permutation":
            return None
        return np.random.default_rng(self.seed).permutation(IMAGE_SIDE * IMAGE_SIDE)

    def apply(self, images):
        """Transform a batch of (n, 28, 28) images; the result keeps that shape."""
        if self.transform == "identity":
            return images
        if self.transform == "permutation":
            n = images.shape[0]
            flat = images.reshape(n, -1)[:, self.permutation]
            return flat.reshape(images.shape)
        return np.ascontiguousarray(rotate90(images, self.quarter_turns))

    def __call__(self, images):
        return self.apply(images)

    def label(self):
        if self.transform == "permutation":
            return f"{self.source}-perm{self.task_id}"
        if self.transform == "rotate90" and self.quarter_turns:
            return f"{self.source}-rot90"
        return self.source


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple = field(default_factory=tuple)
    network_kind: str = "dense"

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def make_permuted_tasks(seed=0, n_tasks=10, first_identity=False, source="mnist"):
    """``n_tasks`` pixel-permutation tasks with seeds derived from ``seed``."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    state = np.random.SeedSequence(seed).generate_state(n_tasks)
    tasks = []
    for i, s in enumerate(state):
        if i == 0 and first_identity:
            tasks.append(TaskSpec(source, "identity", task_id=0))
        else:
            tasks.append(TaskSpec(source, "permutation", seed=int(s), task_id=i))
    return TaskSequence(tuple(tasks), "dense")


def make_rotation_tasks():
    tasks = (
        TaskSpec("mnist", "identity", task_id=0),
        TaskSpec("fashion", "identity", task_id=1),
        TaskSpec("mnist", "rotate90", quarter_turns=1, task_id=2),
        TaskSpec("fashion", "rotate90", quarter_turns=1, task_id=3),
    )
    return TaskSequence(tasks, "conv")


def make_sequence(key, seed=0, n_tasks=None, first_identity=False):
    """Build a task sequence from its config key."""
    if key == "permuted-mnist-10":
        return make_permuted_tasks(seed, 10 if n_tasks is None else n_tasks, first_identity)
    if key == "rotated-mnist-fashion-4":
        seq = make_rotation_tasks()
        if n_tasks is not None:
            seq = TaskSequence(seq.tasks[:n_tasks], seq.network_kind)
        return seq
    raise ValueError(f"unknown task sequence {key!r}; expected one of {SEQUENCES}")


def epoch_order(n, shuffle_seed, epoch=0):
    """Sample order for one epoch; a pure function of (n, seed, epoch)."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(dataset, task=None, batch_size=100, shuffle_seed=None, epoch=0):
    """Yield transformed ``(images, labels)`` minibatches for one epoch.

    Without ``shuffle_seed`` the dataset order is kept. The last batch may be
    shorter than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_order(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if task is not None:
            x = task.apply(x)
        yield x, dataset.labels[idx]
