"""Independent reference implementations the tests check against.

These stay deliberately naive (triple loops, central differences) so they
share no code path with the library.
"""

import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def central_diff(f, x, h=1e-5):
    """Full-coordinate central finite differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def max_rel_grad_err(loss_of_params, params, names=None, h=1e-5, coords_per_param=None,
                     rng=None):
    """Compare analytic grads from ``loss_of_params`` against central FD.

    ``loss_of_params(params) -> (loss, grads)``; FD perturbs copies of the
    parameter arrays. ``coords_per_param`` limits FD to a random coordinate
    subset (full sweep when None).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_of_params(base)
    worst = 0.0
    for name in (names or base):
        arr = base[name]
        flat_idx = np.arange(arr.size)
        if coords_per_param is not None and arr.size > coords_per_param:
            flat_idx = rng.choice(arr.size, size=coords_per_param, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp, _ = loss_of_params(base)
            arr[idx] = old - h
            fm, _ = loss_of_params(base)
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, rel_err(an, fd))
    return worst
