"""Small deterministic neural-network engine on top of numpy.

All parameters of a :class:`Network` live in one flat float64 vector
(``net.params``); each layer owns a contiguous slice of it, recorded in
``net.param_index``. Gradients, importance maps and consolidation anchors are
plain arrays aligned with that vector.
"""

from __future__ import annotations

import math

import numpy as np

from ._kernels import adam_update, col2im, im2col, maxpool_backward, maxpool_forward
from .exceptions import NonFiniteError, ShapeError

__all__ = [
    "Dense",
    "Conv2d",
    "MaxPool2d",
    "ReLU",
    "Flatten",
    "SoftmaxOutput",
    "Network",
    "SGD",
    "Adam",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "clip_global_norm",
    "global_norm",
]


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


# --------------------------------------------------------------------------
# layers
#
# A layer maps a per-sample input shape to a per-sample output shape.
# ``forward`` returns (output, cache); ``backward`` returns (dx, dparams).
# Parameterised layers receive their slice of the flat parameter vector.
# --------------------------------------------------------------------------


class Layer:
    n_params = 0

    def output_shape(self, in_shape):
        return in_shape

    def init_params(self, rng):
        return np.zeros(self.n_params)

    def forward(self, x, p):
        raise NotImplementedError

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        raise NotImplementedError

    def weight_mask(self):
        """Boolean mask over this layer's slice, True for non-bias entries."""
        return np.zeros(self.n_params, dtype=bool)

    def _check(self, x, expected):
        # layers used outside a Network have no declared input shape
        if expected is not None and x.shape[1:] != tuple(expected):
            raise ShapeError(repr(self), (x.shape[0],) + tuple(expected), x.shape)


class Dense(Layer):
    """Fully connected layer, ``y = x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, n_in, n_out):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.n_params = self.n_in * self.n_out + self.n_out

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out})"

    @property
    def fan_in(self):
        return self.n_in

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(repr(self), (self.n_in,), in_shape)
        return (self.n_out,)

    def unpack(self, p):
        k = self.n_in * self.n_out
        return p[:k].reshape(self.n_in, self.n_out), p[k:]

    def init_params(self, rng):
        bound = math.sqrt(6.0 / self.fan_in)
        w = rng.uniform(-bound, bound, size=self.n_in * self.n_out)
        return np.concatenate([w, np.zeros(self.n_out)])

    def weight_mask(self):
        m = np.zeros(self.n_params, dtype=bool)
        m[: self.n_in * self.n_out] = True
        return m

    def forward(self, x, p):
        self._check(x, (self.n_in,))
        w, b = self.unpack(p)
        return x @ w + b, x

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        w, _ = self.unpack(p)
        dp = None
        if need_dp:
            dp = np.empty(self.n_params) if out is None else out
            dw, db = self.unpack(dp)
            np.matmul(cache.T, dy, out=dw)
            np.sum(dy, axis=0, out=db)
        dx = dy @ w.T if need_dx else None
        return dx, dp

    # per-sample helpers used by the importance estimators; ``cache`` is the
    # layer input and ``dy`` holds one row per sample (not batch-averaged)

    def per_sample_sq_sum(self, cache, dy):
        """Sum over samples of the squared per-sample gradient."""
        return np.concatenate([((cache**2).T @ dy**2).ravel(), (dy**2).sum(axis=0)])

    def per_sample_abs_sum(self, cache, dy):
        """Sum over samples of the absolute per-sample gradient."""
        ady = np.abs(dy)
        return np.concatenate([(np.abs(cache).T @ ady).ravel(), ady.sum(axis=0)])

    def input_abs_sum(self, cache):
        """Per-weight sum over samples of |presynaptic activation|."""
        a = np.abs(cache).sum(axis=0)
        return np.broadcast_to(a[:, None], (self.n_in, self.n_out)).ravel()


class Conv2d(Layer):
    """2-D convolution with valid padding on NCHW input.

    The kernel is stored as (out_ch, in_ch, k, k) followed by ``out_ch``
    biases.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.n_params = self.out_ch * self.fan_in + self.out_ch
        self._in_shape = None

    def __repr__(self):
        return f"Conv2d({self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride})"

    @property
    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch or min(in_shape[1:]) < self.kernel:
            raise ShapeError(repr(self), (self.in_ch, "H>=k", "W>=k"), in_shape)
        self._in_shape = tuple(in_shape)
        c, h, w = in_shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (self.out_ch, ho, wo)

    def unpack(self, p):
        k = self.out_ch * self.fan_in
        return p[:k].reshape(self.out_ch, self.fan_in), p[k:]

    def init_params(self, rng):
        bound = math.sqrt(6.0 / self.fan_in)
        w = rng.uniform(-bound, bound, size=self.out_ch * self.fan_in)
        return np.concatenate([w, np.zeros(self.out_ch)])

    def weight_mask(self):
        m = np.zeros(self.n_params, dtype=bool)
        m[: self.out_ch * self.fan_in] = True
        return m

    def _cols(self, x):
        # rows ordered (sample, out_row, out_col); columns (in_ch, ki, kj)
        k, s = self.kernel, self.stride
        ho = (x.shape[2] - k) // s + 1
        wo = (x.shape[3] - k) // s + 1
        return im2col(np.ascontiguousarray(x), k, s, ho, wo), ho, wo

    def forward(self, x, p):
        self._check(x, self._in_shape)
        w, b = self.unpack(p)
        cols, ho, wo = self._cols(x)
        y = cols @ w.T
        y += b
        y = y.reshape(x.shape[0], ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return y, (cols, x.shape)

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        cols, x_shape = cache
        w, _ = self.unpack(p)
        n, _, ho, wo = dy.shape
        dy2 = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        dp = None
        if need_dp:
            dp = np.empty(self.n_params) if out is None else out
            dw, db = self.unpack(dp)
            np.matmul(dy2.T, cols, out=dw)
            np.sum(dy2, axis=0, out=db)
        if not need_dx:
            return None, dp
        dx = col2im(dy2 @ w, n, self.in_ch, x_shape[2], x_shape[3],
                    self.kernel, self.stride, ho, wo)
        return dx, dp

    def _per_sample_grads(self, cache, dy):
        cols, _ = cache
        n = dy.shape[0]
        dyr = dy.reshape(n, self.out_ch, -1)  # (N, O, P)
        gw = np.matmul(dyr, cols.reshape(n, -1, self.fan_in))  # (N, O, CKK)
        gb = dyr.sum(axis=2)
        return gw.reshape(n, -1), gb

    def per_sample_sq_sum(self, cache, dy):
        gw, gb = self._per_sample_grads(cache, dy)
        return np.concatenate([(gw**2).sum(axis=0), (gb**2).sum(axis=0)])

    def per_sample_abs_sum(self, cache, dy):
        gw, gb = self._per_sample_grads(cache, dy)
        return np.concatenate([np.abs(gw).sum(axis=0), np.abs(gb).sum(axis=0)])

    def input_abs_sum(self, cache):
        # each kernel entry sees the same input patch position for all output
        # channels; sum |a| over samples and spatial positions
        cols, _ = cache
        a = np.abs(cols).sum(axis=0)  # (CKK,)
        return np.broadcast_to(a[None, :], (self.out_ch, self.fan_in)).ravel()


class MaxPool2d(Layer):
    """Non-overlapping max pooling; spatial dims must be divisible by ``kernel``."""

    def __init__(self, kernel):
        self.kernel = int(kernel)
        self._in_shape = None

    def __repr__(self):
        return f"MaxPool2d({self.kernel})"

    def output_shape(self, in_shape):
        k = self.kernel
        if len(in_shape) != 3 or in_shape[1] % k or in_shape[2] % k:
            raise ShapeError(repr(self), ("C", f"H%{k}==0", f"W%{k}==0"), in_shape)
        self._in_shape = tuple(in_shape)
        return (in_shape[0], in_shape[1] // k, in_shape[2] // k)

    def forward(self, x, p):
        self._check(x, self._in_shape)
        # ties resolve to the first maximum in row-major window order
        y, arg = maxpool_forward(np.ascontiguousarray(x), self.kernel)
        return y, (arg, x.shape)

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        if not need_dx:
            return None, None
        arg, shape = cache
        dx = maxpool_backward(np.ascontiguousarray(dy), arg, self.kernel, shape[2], shape[3])
        return dx, None


class ReLU(Layer):
    def __repr__(self):
        return "ReLU()"

    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        return (dy * cache if need_dx else None), None


class Flatten(Layer):
    def __repr__(self):
        return "Flatten()"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, p, need_dx=True, need_dp=True, out=None):
        return (dy.reshape(cache) if need_dx else None), None


class SoftmaxOutput(Layer):
    """Marks the network output as class probabilities.

    Only valid as the last layer. Training and importance code work on the
    logits produced by the layers before it.
    """

    def __repr__(self):
        return "SoftmaxOutput()"

    def forward(self, x, p):
        return softmax(x), None


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


class Network:
    """Ordered stack of layers sharing one flat float64 parameter vector.

    Parameters
    ----------
    layers : list of Layer
    input_shape : tuple
        Per-sample input shape, e.g. ``(784,)`` or ``(1, 28, 28)``.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SoftmaxOutput) and i != len(self.layers) - 1:
                raise ValueError("SoftmaxOutput must be the last layer")
        self.param_index = {}
        shape = self.input_shape
        offset = 0
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            if layer.n_params:
                self.param_index[i] = (offset, layer.n_params)
                offset += layer.n_params
        self.output_shape = shape
        self.params = np.zeros(offset)

    @classmethod
    def dense(cls, sizes=(784, 300, 150, 10)):
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [Dense(a, b), ReLU()]
        layers[-1] = SoftmaxOutput()
        return cls(layers, (sizes[0],))

    @classmethod
    def conv(cls, n_classes=10):
        layers = [
            Conv2d(1, 32, 5), ReLU(), MaxPool2d(2),
            Conv2d(32, 64, 5), ReLU(), MaxPool2d(2),
            Flatten(),
            Dense(1024, 256), ReLU(),
            Dense(256, n_classes),
            SoftmaxOutput(),
        ]
        return cls(layers, (1, 28, 28))

    def __repr__(self):
        return f"Network({', '.join(map(repr, self.layers))})"

    @property
    def n_params(self):
        return self.params.size

    @property
    def has_softmax(self):
        return bool(self.layers) and isinstance(self.layers[-1], SoftmaxOutput)

    def layer_params(self, i):
        off, n = self.param_index[i]
        return self.params[off : off + n]

    def param_layers(self):
        """Yield ``(index, layer, offset, length)`` for parameterised layers."""
        for i, (off, n) in self.param_index.items():
            yield i, self.layers[i], off, n

    def weight_mask(self):
        """Boolean mask over ``params``: True for weights, False for biases."""
        mask = np.zeros(self.n_params, dtype=bool)
        for _, layer, off, n in self.param_layers():
            mask[off : off + n] = layer.weight_mask()
        return mask

    def fingerprint(self):
        return f"{self!r};input={self.input_shape};n_params={self.n_params}"

    def seeded_init(self, seed):
        """Fan-in uniform weights in ``±sqrt(6/fan_in)``, zero biases."""
        rng = np.random.default_rng(seed)
        for _, layer, off, n in self.param_layers():
            self.params[off : off + n] = layer.init_params(rng)
        return self

    def copy(self):
        other = Network.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        return other

    # -- forward / backward ------------------------------------------------

    def _body(self):
        return self.layers[:-1] if self.has_softmax else self.layers

    def logits(self, x, keep_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0] if self.layers else "input"
            raise ShapeError(repr(first), (x.shape[0],) + self.input_shape, x.shape)
        caches = []
        for i, layer in enumerate(self._body()):
            p = self.layer_params(i) if i in self.param_index else None
            x, cache = layer.forward(x, p)
            if keep_cache:
                caches.append(cache)
        return (x, caches) if keep_cache else x

    def forward(self, x):
        """Probabilities if the net ends in SoftmaxOutput, else logits."""
        z = self.logits(x)
        return softmax(z) if self.has_softmax else z

    def backprop(self, caches, dout, need_grad=True, hook=None):
        """Propagate ``dout`` (gradient w.r.t. logits) back through the body.

        ``hook(i, layer, cache, dy)`` is called for every parameterised layer
        with the gradient w.r.t. that layer's output, rows per sample.
        Returns the flat parameter gradient (or None if ``need_grad`` is false).
        """
        grad = np.empty(self.n_params) if need_grad else None
        body = self._body()
        first_param = min(self.param_index) if self.param_index else 0
        dy = dout
        for i in range(len(body) - 1, -1, -1):
            layer = body[i]
            p = self.layer_params(i) if i in self.param_index else None
            if hook is not None and p is not None:
                hook(i, layer, caches[i], dy)
            need_dx = i > first_param
            if p is not None and need_grad:
                off, n = self.param_index[i]
                dy_new, _ = layer.backward(dy, caches[i], p, need_dx=need_dx,
                                           out=grad[off : off + n])
            elif need_dx:
                dy_new, _ = layer.backward(dy, caches[i], p, need_dx=True, need_dp=False)
            else:
                break
            dy = dy_new
        return grad

    def backward(self, x, targets, loss="cross_entropy", batch_index=None):
        """Mean cross-entropy over the batch and its parameter gradient."""
        if loss != "cross_entropy":
            raise ValueError(f"unsupported loss {loss!r}")
        targets = np.asarray(targets)
        z, caches = self.logits(x, keep_cache=True)
        value, dz = cross_entropy(z, targets)
        if not np.isfinite(value):
            raise NonFiniteError("batch", batch_index, f"loss={value}")
        return float(value), self.backprop(caches, dz)

    def predict(self, x, batch_size=1000):
        out = [self.logits(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


# --------------------------------------------------------------------------
# optimizers and clipping
# --------------------------------------------------------------------------


def global_norm(grad):
    return float(np.sqrt(np.dot(grad, grad)))


def clip_global_norm(grad, max_norm):
    """Rescale ``grad`` so its L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grad)
    if norm <= max_norm:
        return grad.copy()
    return grad * (max_norm / norm)


def _check_params(params):
    if not np.isfinite(params).all():
        idx = int(np.flatnonzero(~np.isfinite(params))[0])
        raise NonFiniteError("parameter", idx, f"value={params[idx]}")


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def reset(self, n_params=None):
        pass

    def step(self, net, grad):
        """Apply ``w <- w - lr * grad`` in place; returns the realised change."""
        delta = -self.lr * grad
        net.params += delta
        _check_params(net.params)
        return delta


class Adam:
    """Bias-corrected Adam with state aligned to ``net.params``."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self._delta = None
        self.v = None
        self.t = 0

    def reset(self, n_params=None):
        self.m = None if n_params is None else np.zeros(n_params)
        self.v = None if n_params is None else np.zeros(n_params)
        self._delta = None if n_params is None else np.zeros(n_params)
        self.t = 0

    def step(self, net, grad):
        """Update ``net.params`` in place; returns the realised change.

        The returned array is an internal buffer, overwritten on the next step.
        """
        if self.m is None or self.m.shape != grad.shape:
            self.reset(grad.size)
        self.t += 1
        c2 = math.sqrt(1 - self.beta2**self.t)
        lr_t = self.lr * c2 / (1 - self.beta1**self.t)
        # lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections folded in
        adam_update(net.params, np.ascontiguousarray(grad, dtype=np.float64), self.m,
                    self.v, lr_t, self.beta1, self.beta2, self.eps * c2, self._delta)
        _check_params(net.params)
        return self._delta
