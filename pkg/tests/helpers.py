"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np


def fd_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def conv_reference(w, b, x, dilation):
    """Triple loop over output channel, time and tap with explicit bounds checks."""
    out_ch, in_ch, k = w.shape
    n = x.shape[1]
    left = ((k - 1) * dilation) // 2
    y = np.zeros((out_ch, n))
    for o in range(out_ch):
        for t in range(n):
            acc = b[o]
            for c in range(in_ch):
                for j in range(k):
                    src = t + j * dilation - left
                    if 0 <= src < n:
                        acc += w[o, c, j] * x[c, src]
            y[o, t] = acc
    return y


def zero_inflate(w, dilation):
    out_ch, in_ch, k = w.shape
    dense = np.zeros((out_ch, in_ch, (k - 1) * dilation + 1))
    for j in range(k):
        dense[:, :, j * dilation] = w[:, :, j]
    return dense


def strided_conv_matrix(w, stride, n_x):
    """Matrix of the valid stride-``s`` convolution mapping ``s(n_x-1)+n_w`` samples to ``n_x``."""
    n_w = len(w)
    n_y = stride * (n_x - 1) + n_w
    m = np.zeros((n_x, n_y))
    for i in range(n_x):
        m[i, stride * i : stride * i + n_w] = w
    return m


def tconv_columns_matrix(w, stride, n_x):
    """Transform matrix built column by column: column i is s*i zeros, w, then zeros."""
    n_w = len(w)
    n_y = stride * (n_x - 1) + n_w
    cols = []
    for i in range(n_x):
        cols.append(np.concatenate([np.zeros(stride * i), w, np.zeros(stride * (n_x - 1 - i))]))
    m = np.stack(cols, axis=1)
    assert m.shape == (n_y, n_x)
    return m


def dense_matrix(f, n_in):
    """Matrix of a linear map on length-``n_in`` vectors, from its unit responses."""
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        cols.append(np.asarray(f(e), dtype=np.float64).ravel())
    return np.stack(cols, axis=1)


def untied_signal(rng, channels, frames, gap=0.01):
    """Random values whose pairwise gaps all exceed ``gap`` (safe for max-pool differences)."""
    base = rng.permutation(channels * frames).reshape(channels, frames) * gap
    return base + rng.uniform(0, gap / 4, (channels, frames)) - base.mean()


def probe_receptive_field(predict, in_ch, frames, center, rng):
    """Indices of outputs that change when one input frame is perturbed."""
    x = rng.normal(size=(in_ch, frames))
    base = predict(x)
    x2 = x.copy()
    x2[:, center] += rng.normal(size=in_ch) * 2.0
    changed = np.nonzero(predict(x2) != base)[0]
    return changed
