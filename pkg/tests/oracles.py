"""Independent reference implementations used as test oracles.

Everything here is written without the package's own kernels: plain Python
loops, float64 central differences, and scalar formulas.
"""

import math

import numpy as np


def triple_loop_matmul(a, b):
    """Exact integer product with Python ints (arbitrary precision)."""
    a = np.asarray(a)
    b = np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.int64)
    al = a.astype(np.int64).tolist()
    bl = b.astype(np.int64).tolist()
    for i in range(m):
        for j in range(n):
            s = 0
            for t in range(k):
                s += al[i][t] * bl[t][j]
            out[i, j] = s
    return out


def float_triple_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(a.shape[1]):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, arrays, h=1e-3):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array (float64)."""
    grads = []
    for idx, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            pos = it.multi_index
            orig = a[pos]
            a[pos] = orig + h
            fp = f(*arrays)
            a[pos] = orig - h
            fm = f(*arrays)
            a[pos] = orig
            g[pos] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Norm-wise relative error with a small absolute floor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def gelu_tanh_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam on one scalar over a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def kl_scalar(t_logits, s_logits, temperature=1.0):
    """KL(softmax(t/T) || softmax(s/T)) * T^2 with Python floats."""
    def sm(z):
        z = [v / temperature for v in z]
        mx = max(z)
        e = [math.exp(v - mx) for v in z]
        tot = sum(e)
        return [v / tot for v in e]

    p, q = sm(t_logits), sm(s_logits)
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q)) * temperature**2


def round_half_even(v):
    return float(round(v))  # Python's round is banker's rounding


def quantize_scalar_sym(xs, bits):
    """Symmetric quantization of one group with Python floats."""
    qmax = 2 ** (bits - 1) - 1
    m = max(abs(v) for v in xs)
    scale = m / qmax if m > 0 else 1.0
    ints = [int(round_half_even(min(max(v / scale, -qmax - 1), qmax))) for v in xs]
    return scale, ints


def best_nm_keep(row, n, m):
    """Brute force over all keep-sets of size m-n in every m-group: max kept |w| sum."""
    from itertools import combinations

    keep = []
    for g in range(0, len(row), m):
        grp = [abs(v) for v in row[g:g + m]]
        best = max(combinations(range(m), m - n), key=lambda c: (sum(grp[i] for i in c), c))
        keep += [i in best for i in range(m)]
    return np.array(keep)


def entropy_rate(p):
    """Entropy rate of a first-order chain via power iteration for the stationary law."""
    p = np.asarray(p, dtype=np.float64)
    pi = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(10000):
        pi = pi @ p
    h = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0:
                h -= pi[i] * p[i, j] * math.log(p[i, j])
    return h


def positional_gap_loops(batch):
    """Per-position mean over samples of (max - min) over features, with plain loops."""
    b, t, _ = batch.shape
    out = []
    for p in range(t):
        tot = 0.0
        for i in range(b):
            vals = [float(v) for v in batch[i, p]]
            tot += max(vals) - min(vals)
        out.append(tot / b)
    return np.array(out)
