"""Per-parameter importance estimators.

Every estimator returns an :class:`ImportanceMap` whose ``omega`` array is
aligned with ``net.params``. Sample-based estimators average over samples;
per-sample gradients are exact (each row of a batch is back-propagated
independently), so the result equals a batch-size-1 loop.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import MethodMismatchError, NonFiniteError, UsageError
from .nn import softmax

logger = logging.getLogger(__name__)

FISHER_MODES = ("label", "argmax", "sampled")
METHODS = ("fisher_label", "fisher_argmax", "fisher_sampled", "mas", "si", "total_abs_signal")


@dataclass
class ImportanceMap:
    omega: np.ndarray
    method: str
    n_samples_used: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown importance method {self.method!r}")
        self.omega = np.asarray(self.omega, dtype=np.float64)

    def __len__(self):
        return self.omega.size

    @classmethod
    def zeros(cls, n_params, method):
        return cls(np.zeros(n_params), method, 0)

    def save(self, path, fingerprint=""):
        """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.omega.astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {
            "method": self.method,
            "n_samples": int(self.n_samples_used),
            "n_params": int(self.omega.size),
            "network": fingerprint,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        omega = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if omega.size != meta["n_params"]:
            raise ValueError(f"{path}: expected {meta['n_params']} values, found {omega.size}")
        return cls(omega.astype(np.float64), meta["method"], meta["n_samples"])


def accumulate(prev, new):
    """Elementwise sum of two maps of the same method and alignment."""
    if prev.method != new.method:
        raise MethodMismatchError(f"cannot accumulate {new.method} into {prev.method}")
    if prev.omega.shape != new.omega.shape:
        raise MethodMismatchError(f"length mismatch: {prev.omega.size} vs {new.omega.size}")
    return ImportanceMap(prev.omega + new.omega, prev.method, prev.n_samples_used + new.n_samples_used)


def _chunks(X, y, n_samples, chunk_size, transform):
    n = len(X) if n_samples is None else min(int(n_samples), len(X))
    for start in range(0, n, chunk_size):
        x = X[start : min(start + chunk_size, n)]
        if transform is not None:
            x = transform(x)
        yield start, x, (None if y is None else y[start : start + len(x)])


def _per_sample_reduce(net, X, y, dlogits_fn, reducer, n_samples, chunk_size, transform):
    total = np.zeros(net.n_params)
    count = 0

    for start, xb, yb in _chunks(X, y, n_samples, chunk_size, transform):
        xb = xb.reshape((len(xb),) + net.input_shape)
        z, caches = net.logits(xb, keep_cache=True)
        dz = dlogits_fn(z, yb)
        bad = ~np.isfinite(dz).all(axis=1)
        if bad.any():
            raise NonFiniteError("sample", start + int(np.flatnonzero(bad)[0]))

        def hook(i, layer, cache, dy):
            off, n = net.param_index[i]
            total[off : off + n] += getattr(layer, reducer)(cache, dy)

        net.backprop(caches, dz, need_grad=False, hook=hook)
        count += len(xb)
    if not np.isfinite(total).all():
        raise NonFiniteError("parameter", int(np.flatnonzero(~np.isfinite(total))[0]))
    return total / max(count, 1), count


def fisher_importance(net, X, y=None, mode="label", n_samples=None, rng=None,
                      transform=None, chunk_size=500):
    """Diagonal Fisher: mean squared gradient of log p(c|x).

    ``mode`` picks the class ``c``: the dataset label ('label'), the
    network's most probable class ('argmax') or a class drawn from the
    predicted distribution ('sampled', using ``rng``).
    """
    if mode not in FISHER_MODES:
        raise ValueError(f"mode must be one of {FISHER_MODES}")
    if mode == "label" and y is None:
        raise ValueError("label mode needs labels")
    if mode == "sampled" and rng is None:
        rng = np.random.default_rng(0)

    def dlogits(z, yb):
        p = softmax(z)
        if mode == "label":
            c = np.asarray(yb)
        elif mode == "argmax":
            c = z.argmax(axis=1)
        else:
            u = rng.random(len(z))[:, None]
            c = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
        # d log softmax(z)_c / dz = onehot(c) - p
        g = -p
        g[np.arange(len(z)), c] += 1.0
        return g

    omega, count = _per_sample_reduce(net, X, y if mode == "label" else None, dlogits,
                                      "per_sample_sq_sum", n_samples, chunk_size, transform)
    return ImportanceMap(omega, f"fisher_{mode}", count)


def mas_importance(net, X, n_samples=None, transform=None, chunk_size=500):
    """Memory Aware Synapses: mean |d ||f(x)||^2 / dw| over samples.

    ``f`` is the pre-softmax output; labels are never used.
    """
    omega, count = _per_sample_reduce(net, X, None, lambda z, _: 2.0 * z,
                                      "per_sample_abs_sum", n_samples, chunk_size, transform)
    return ImportanceMap(omega, "mas", count)


def total_abs_signal_importance(net, X, n_samples=None, transform=None, chunk_size=500):
    """Mean absolute signal |a_j * w_ij| carried by each connection.

    For convolution kernels the signal is summed over every spatial position
    the weight is applied at. Bias importance is ``|b|``.
    """
    act = np.zeros(net.n_params)
    count = 0
    for _, xb, _ in _chunks(X, None, n_samples, chunk_size, transform):
        xb = xb.reshape((len(xb),) + net.input_shape)
        _, caches = net.logits(xb, keep_cache=True)
        for i, layer, off, n in net.param_layers():
            k = int(layer.weight_mask().sum())
            act[off : off + k] += layer.input_abs_sum(caches[i])
        count += len(xb)
    act /= max(count, 1)
    omega = np.abs(net.params) * np.where(net.weight_mask(), act, 1.0)
    return ImportanceMap(omega, "total_abs_signal", count)


class SIAccumulator:
    """Synaptic Intelligence path integral for one task at a time.

    Call :meth:`begin_task` before training, :meth:`record_step` after every
    optimizer step with the task-loss gradient (penalty excluded) and the
    realised parameter change, then :meth:`finish_task`.
    """

    def __init__(self, xi=0.1):
        if xi <= 0:
            raise ValueError("xi must be positive")
        self.xi = xi
        self.omega_path = None
        self.w_task_start = None
        self._buf = None
        self._steps = 0

    def begin_task(self, net):
        self.w_task_start = net.params.copy()
        self.omega_path = np.zeros(net.n_params)
        self._buf = np.empty(net.n_params)
        self._steps = 0

    def record_step(self, grad_task, delta_w):
        if self.omega_path is None:
            raise UsageError("record_step called before begin_task")
        np.multiply(grad_task, delta_w, out=self._buf)
        self.omega_path -= self._buf
        self._steps += 1

    def finish_task(self, net):
        if self.omega_path is None:
            raise UsageError("finish_task called before begin_task")
        disp = net.params - self.w_task_start
        omega = np.maximum(self.omega_path, 0.0) / (disp * disp + self.xi)
        self.omega_path = None
        return ImportanceMap(omega, "si", self._steps)


def importance_spread(net, imap):
    """max/mean importance ratio for each parameterised layer."""
    out = {}
    for i, layer, off, n in net.param_layers():
        seg = imap.omega[off : off + n]
        mean = seg.mean()
        out[f"{i}:{layer!r}"] = float(seg.max() / mean) if mean > 0 else 0.0
    return out
