"""Central finite-difference harness.

The numeric side always runs in float64. Analytic gradients are checked at
float64 against ``TOL64`` and, recomputed from float32 copies of the same
inputs, against ``TOL32``.
"""

import numpy as np

TOL32 = 1e-3
TOL64 = 1e-6


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def sample_indices(shape, limit, rng):
    total = int(np.prod(shape))
    if total <= limit:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=limit, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def numeric_grad(loss, array, indices, eps=1e-6):
    """d loss / d array[idx] by central differences; ``array`` is perturbed
    in place and restored."""
    out = []
    for idx in indices:
        old = array[idx]
        array[idx] = old + eps
        lp = loss()
        array[idx] = old - eps
        lm = loss()
        array[idx] = old
        out.append((lp - lm) / (2 * eps))
    return np.array(out)


def check_gradients(loss, arrays, analytic, limit=40, eps=1e-6, seed=0):
    """Worst relative error over the named float64 ``arrays``.

    ``loss()`` must read the arrays in place; ``analytic`` maps the same
    names to gradient arrays.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in arrays.items():
        idx = sample_indices(arr.shape, limit, rng)
        num = numeric_grad(loss, arr, idx, eps)
        ana = np.array([analytic[name][i] for i in idx])
        worst = max(worst, rel_error(ana, num))
    return worst
