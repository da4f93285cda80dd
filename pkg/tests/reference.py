"""Straight-line numpy attention used as an oracle; shares no code with qvlab."""

import numpy as np


def softmax(z, mask=None):
    z = np.array(z, dtype=float)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head(q, k, v, causal=False, coeff=None, pcm_v=False):
    logits = q @ k.T / np.sqrt(q.shape[1])
    if coeff is not None:
        logits = logits * coeff
    mask = None
    if causal:
        mask = np.tril(np.ones((q.shape[0], k.shape[0]), dtype=bool))
    a = softmax(logits, mask)
    mix = a * coeff if pcm_v else a
    return mix @ v, a


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g
