"""Fused loops that numpy cannot express without large temporaries."""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, k, s, ho, wo):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n * ho * wo, c * k * k))
    for b in range(n):
        for h in range(ho):
            for w in range(wo):
                row = (b * ho + h) * wo + w
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[row, col] = x[b, ch, h * s + i, w * s + j]
                            col += 1
    return out


@numba.njit(cache=True)
def col2im(dcols, n, c, height, width, k, s, ho, wo):
    dx = np.zeros((n, c, height, width))
    for b in range(n):
        for h in range(ho):
            for w in range(wo):
                row = (b * ho + h) * wo + w
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            dx[b, ch, h * s + i, w * s + j] += dcols[row, col]
                            col += 1
    return dx


@numba.njit(cache=True)
def adam_update(params, grad, m, v, lr_t, beta1, beta2, eps_t, delta):
    for i in range(params.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        d = -lr_t * m[i] / (math.sqrt(v[i]) + eps_t)
        delta[i] = d
        params[i] += d


@numba.njit(cache=True)
def maxpool_forward(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    y = np.empty((n, c, ho, wo))
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, i * k, j * k]
                    pos = 0
                    for di in range(k):
                        for dj in range(k):
                            v = x[b, ch, i * k + di, j * k + dj]
                            if v > best:
                                best = v
                                pos = di * k + dj
                    y[b, ch, i, j] = best
                    arg[b, ch, i, j] = pos
    return y, arg


@numba.njit(cache=True)
def maxpool_backward(dy, arg, k, h, w):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    pos = arg[b, ch, i, j]
                    dx[b, ch, i * k + pos // k, j * k + pos % k] = dy[b, ch, i, j]
    return dx
