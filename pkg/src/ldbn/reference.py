"""Slow nested-loop reference implementations used as test oracles.

Nothing here is vectorized on purpose: each function follows the textbook
definition element by element so it shares no code path with ``kernels``.
"""

import math

import numpy as np


def conv2d_naive(x, w, stride=1, pad=0):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                r = i * stride + di - pad
                                s = j * stride + dj - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[b, c, r, s]) * float(w[o, c, di, dj])
                    out[b, o, i, j] = acc
    return out


def linear_naive(x, w, b=None):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout), dtype=np.float64)
    for i in range(n):
        for o in range(dout):
            acc = 0.0 if b is None else float(b[o])
            for d in range(din):
                acc += float(x[i, d]) * float(w[o, d])
            out[i, o] = acc
    return out


def maxpool2_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[b, ch, i, j] = max(float(x[b, ch, 2 * i + di, 2 * j + dj])
                                           for di in (0, 1) for dj in (0, 1))
    return out


def entropy_naive(probs):
    """-sum p ln p for one distribution, with 0 ln 0 = 0."""
    return -sum(p * math.log(p) for p in probs if p > 0)


def accuracy_naive(pred_cells, label_cells, background, tolerance=1):
    """Count hits group by group."""
    hits = total = 0
    for row_p, row_l in zip(pred_cells, label_cells):
        for p, l in zip(row_p, row_l):
            total += 1
            if l == background:
                hits += p == background
            else:
                hits += p != background and abs(p - l) <= tolerance
    return hits / total
