import numpy as np
import pytest


def naive_conv2d(x, k, b, stride, padding):
    """Six nested loops; the reference the im2col path is checked against."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[bi, ci, i * stride + di, j * stride + dj] * k[co, ci, di, dj]
                    out[bi, co, i, j] = acc
    return out


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` (numpy in, float out)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
