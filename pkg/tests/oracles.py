"""Independent naive-loop reference implementations used as test oracles.

Everything here is deliberately written as plain quadruple loops or direct
formula transcriptions, sharing no code with the package under test.
"""

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += (xp[ni, ci, i * stride + di, j * stride + dj]
                                        * w[co, ci, di, dj])
                    out[ni, co, i, j] = acc + b[co]
    return out


def upconv2_loops(x, w, b):
    """Scatter-accumulate transposed convolution, 2x2 kernel, stride 2."""
    n, cin, h, wd = x.shape
    _, cout, _, _ = w.shape
    out = np.zeros((n, cout, 2 * h, 2 * wd), dtype=np.float64)
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    for co in range(cout):
                        for di in range(2):
                            for dj in range(2):
                                out[ni, co, 2 * i + di, 2 * j + dj] += (
                                    x[ni, ci, i, j] * w[ci, co, di, dj])
    for co in range(cout):
        out[:, co] += b[co]
    return out


def maxpool2_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = max(
                        x[ni, ci, 2 * i, 2 * j], x[ni, ci, 2 * i, 2 * j + 1],
                        x[ni, ci, 2 * i + 1, 2 * j], x[ni, ci, 2 * i + 1, 2 * j + 1])
    return out


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def rowsoftmax_direct(x):
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        e = np.exp(x[i].astype(np.float64))
        out[i] = e / e.sum()
    return out


def batchnorm_train_direct(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        xc = x[:, c].astype(np.float64)
        mu = xc.mean()
        var = xc.var()
        out[:, c] = gamma[c] * (xc - mu) / np.sqrt(var + eps) + beta[c]
    return out


def dice_counters(a, b):
    """Three-counter brute force over flattened masks."""
    inter = both = 0
    na = nb = 0
    for pa, pb in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        na += int(pa)
        nb += int(pb)
        if pa and pb:
            inter += 1
    both = na + nb
    if both == 0:
        return 1.0
    return 2.0 * inter / both
