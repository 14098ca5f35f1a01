"""Independent scalar reference implementations used as test oracles."""

import math

import numpy as np


def squash_scalar(s):
    sq = sum(x * x for x in s)
    if sq == 0:
        return [0.0] * len(s)
    n = math.sqrt(sq)
    f = sq / (1 + sq) / n
    return [x * f for x in s]


def routing_scalar(u_hat, iterations):
    """Hand-stepped routing over nested lists u_hat[i][j][d]; returns (v, couplings per pass)."""
    n_in = len(u_hat)
    n_out = len(u_hat[0])
    dim = len(u_hat[0][0])
    b = [[0.0] * n_out for _ in range(n_in)]
    history = []
    v = None
    for it in range(iterations):
        c = []
        for i in range(n_in):
            m = max(b[i])
            e = [math.exp(b[i][j] - m) for j in range(n_out)]
            z = sum(e)
            c.append([x / z for x in e])
        history.append(c)
        v = []
        for j in range(n_out):
            s = [sum(c[i][j] * u_hat[i][j][d] for i in range(n_in)) for d in range(dim)]
            v.append(squash_scalar(s))
        if it < iterations - 1:
            for i in range(n_in):
                for j in range(n_out):
                    b[i][j] += sum(u_hat[i][j][d] * v[j][d] for d in range(dim))
    return np.array(v), np.array(history)


def ssim_bruteforce(a, b, window=7, sigma=1.5, data_range=1.0):
    """Per-window SSIM with explicit loops over window positions and pixels."""
    half = (window - 1) / 2.0
    g = [[math.exp(-((u - half) ** 2 + (v - half) ** 2) / (2 * sigma ** 2)) for v in range(window)]
         for u in range(window)]
    total = sum(sum(row) for row in g)
    g = [[x / total for x in row] for row in g]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = len(a), len(a[0])
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(window):
                for v in range(window):
                    x = a[i + u][j + v]
                    y = b[i + u][j + v]
                    wt = g[u][v]
                    ma += wt * x
                    mb += wt * y
                    saa += wt * x * x
                    sbb += wt * y * y
                    sab += wt * x * y
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def pearson_scalar(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)
