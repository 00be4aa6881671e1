"""Independent reference implementations used as test oracles.

These are deliberately slow and written without reusing package code paths.
"""
import math

import numpy as np


def conv_direct(x, kernel, bias=None, stride=1):
    """Zero-padded 'same' cross-correlation by explicit summation (NHWC)."""
    n, h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for di in range(k):
                    for dj in range(k):
                        r = i * stride + di - pad
                        c = j * stride + dj - pad
                        if 0 <= r < h and 0 <= c < w:
                            out[b, i, j] += x[b, r, c] @ kernel[di, dj]
    if bias is not None:
        out += bias
    return out


def dft2_direct(x):
    """``F[k,l] = sum_n sum_m x[n,m] exp(-j 2 pi (nk/H + ml/W))``."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for k in range(h):
        for l in range(w):
            acc = 0j
            for n in range(h):
                for m in range(w):
                    acc += x[n, m] * complex(math.cos(-2 * math.pi * (n * k / h + m * l / w)),
                                             math.sin(-2 * math.pi * (n * k / h + m * l / w)))
            out[k, l] = acc
    return out


def cosine_pairwise(f):
    """Mean cosine over ordered pairs of distinct positions, by double loop."""
    vecs = f.reshape(-1, f.shape[-1])
    total, count = 0.0, 0
    for a in range(len(vecs)):
        for b in range(len(vecs)):
            if a != b:
                total += float(vecs[a] @ vecs[b]) / (np.linalg.norm(vecs[a]) * np.linalg.norm(vecs[b]))
                count += 1
    return total / count


def ssim_direct(a, b, win=11, sigma=1.5, data_range=1.0):
    """SSIM with an explicit 2D Gaussian window, evaluated window by window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    ax = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-ax**2 / (2 * sigma**2))
    wgt = np.outer(g1, g1)
    wgt /= wgt.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (wgt * pa).sum(), (wgt * pb).sum()
            va = (wgt * (pa - ma) ** 2).sum()
            vb = (wgt * (pb - mb) ** 2).sum()
            cov = (wgt * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def attention_by_hand(x, wq, wk, wv, wo, table, h, w, heads, scale):
    """Relative-position MHSA for one token set ``(N, D)``, written with loops."""
    n, din = x.shape
    e = wq.shape[1]
    dh = e // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, e))
    attn = np.zeros((heads, n, n))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(n):
            ri, ci = divmod(i, w)
            scores = np.zeros(n)
            for j in range(n):
                rj, cj = divmod(j, w)
                bias = table[hd, (ri - rj + h - 1) * (2 * w - 1) + (ci - cj + w - 1)]
                scores[j] = (q[i, sl] @ k[j, sl] + bias) / math.sqrt(scale)
            p = np.exp(scores - scores.max())
            p /= p.sum()
            attn[hd, i] = p
            out[i, sl] = p @ v[:, sl]
    return out @ wo, attn
