"""Independent reference implementations used by the tests.

Everything here is plain loops over Python floats or numpy scalars; none of it
calls into the package's tensor code.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, w, b=None):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, h, wd))
    for a in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i + u - ph, j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[a, c, ii, jj]) * float(w[o, c, u, v])
                    out[a, o, i, j] = acc
    return out


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def conv_lstm_loop(s, h_prev, c_prev, weights: dict, biases: dict):
    """Gate equations evaluated pixel by pixel; weights keyed W_si ... W_ho, biases b_i ... b_o."""
    conv = {k: conv2d_loop(s if k[2] == "s" else h_prev, w) for k, w in weights.items()}
    _, ch, hh, ww = s.shape
    h = np.zeros(s.shape)
    c = np.zeros(s.shape)
    for k in range(ch):
        for i in range(hh):
            for j in range(ww):
                pre = {
                    g: conv[f"W_s{g}"][0, k, i, j] + conv[f"W_h{g}"][0, k, i, j] + biases[f"b_{g}"][k]
                    for g in "ifco"
                }
                ig, fg, og = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
                cell = fg * c_prev[0, k, i, j] + ig * math.tanh(pre["c"])
                c[0, k, i, j] = cell
                h[0, k, i, j] = og * math.tanh(cell)
    return h, c


def l1_loop(pred, target) -> float:
    p, t = np.ravel(pred), np.ravel(target)
    total = 0.0
    for a, b in zip(p, t):
        total += abs(float(a) - float(b))
    return total / len(p)


def ssim_direct(x, y, k1=0.01, k2=0.03, size=11, sigma=1.5, peak=255.0) -> float:
    """Per-window weighted statistics computed explicitly at every valid offset."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    half = (size - 1) / 2
    g = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2)) for j in range(size)] for i in range(size)])
    g /= g.sum()
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px = x[i : i + size, j : j + size]
            py = y[i : i + size, j : j + size]
            mx, my = float((g * px).sum()), float((g * py).sum())
            vx = float((g * (px - mx) ** 2).sum())
            vy = float((g * (py - my) ** 2).sum())
            cov = float((g * (px - mx) * (py - my)).sum())
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def dct_basis(n: int, u: int, v: int) -> np.ndarray:
    """Orthonormal 2-D DCT-II basis image with frequency (u, v)."""

    def vec(k):
        a = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
        return np.array([a * math.cos(math.pi * (2 * t + 1) * k / (2 * n)) for t in range(n)])

    return np.outer(vec(u), vec(v))


def adam_scalar(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, p0=0.0):
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out
