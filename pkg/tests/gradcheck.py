"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np

H = 1e-5


def rel_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(f, arr, indices, h=H):
    """d f / d arr[i] for each flat index, by central differences (arr is perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def sample_indices(arr, n, rng):
    return rng.choice(arr.size, size=min(n, arr.size), replace=False)
