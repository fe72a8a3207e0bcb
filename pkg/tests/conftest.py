import os
from pathlib import Path

import numpy as np
import pytest

from consolidate import data
from consolidate.nn import Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, SoftmaxOutput


def _data_dir():
    env = os.environ.get("CONSOLIDATE_DATA_DIR")
    for cand in filter(None, [env, "data", "/root/data"]):
        if not data.missing_files(cand, ["mnist"]):
            return str(Path(cand).resolve())
    return None


DATA_DIR = _data_dir()

needs_mnist = pytest.mark.skipif(DATA_DIR is None, reason="MNIST IDX files not found")


@pytest.fixture
def data_dir():
    if DATA_DIR is None:
        pytest.skip("MNIST IDX files not found")
    return DATA_DIR


def tiny_dense(sizes=(4, 5, 3), seed=0, softmax=True):
    net = Network.dense(sizes) if softmax else Network(
        [Dense(sizes[0], sizes[1]), ReLU(), Dense(sizes[1], sizes[2])], (sizes[0],)
    )
    return net.seeded_init(seed)


def tiny_conv(seed=0):
    # 2x6x6 input -> conv3 (2 ch) -> 2x4x4 -> pool2 -> 2x2x2 -> dense 8->3
    net = Network(
        [Conv2d(2, 2, 3), ReLU(), MaxPool2d(2), Flatten(), Dense(8, 3), SoftmaxOutput()],
        (2, 6, 6),
    )
    return net.seeded_init(seed)


def perturb_params(net, seed=0, scale=0.3):
    """Nonzero biases so bias gradients are exercised too."""
    rng = np.random.default_rng(seed)
    net.params += scale * rng.standard_normal(net.n_params)
    return net


def kink_margin(net, x):
    """Smallest distance of any ReLU input from 0 or any pooling window from a tie.

    Central differences are only meaningful when this is well above the step.
    """
    margin = np.inf
    a = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net._body()):
        p = net.layer_params(i) if i in net.param_index else None
        if isinstance(layer, ReLU):
            margin = min(margin, np.abs(a).min())
        elif isinstance(layer, MaxPool2d):
            k = layer.kernel
            n, c, h, w = a.shape
            win = a.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, -1)
            top = np.sort(win, axis=-1)
            margin = min(margin, (top[..., -1] - top[..., -2]).min())
        a, _ = layer.forward(a, p)
    return margin


def smooth_sample(net, shape, n, rng, margin=1e-3, tries=200):
    """Draw inputs whose forward pass stays clear of ReLU and max-pool kinks."""
    for _ in range(tries):
        x = rng.standard_normal((n,) + tuple(shape))
        if kink_margin(net, x) > margin:
            return x
    raise RuntimeError("could not draw a kink-free input")


def write_idx(path, array, magic):
    import struct

    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def band_images(n, seed):
    """Learnable stand-in for MNIST: class c brightens rows 2c..2c+2."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 10, n)
    x = rng.integers(0, 60, (n, 28, 28))
    for i, c in enumerate(y):
        x[i, 2 * c : 2 * c + 3] += 180
    return x.clip(0, 255), y


@pytest.fixture(scope="session")
def synthetic_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic_data")
    for k, corpus in enumerate(data.CORPORA):
        (root / corpus).mkdir()
        for split, n in (("train", 300), ("test", 100)):
            x, y = band_images(n, seed=10 * k + (split == "test"))
            img, lab = data.IDX_FILES[split]
            write_idx(root / corpus / img, x, data.IMAGES_MAGIC)
            write_idx(root / corpus / lab, y, data.LABELS_MAGIC)
    return str(root)


# -- acceptance report --------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = ("PASS" if passed else "FAIL", detail)


def record_skip(number, reason):
    ACCEPTANCE[number] = ("SKIP", reason)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
