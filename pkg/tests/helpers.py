"""Shared test oracles: central finite differences over flat parameter lists."""

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f(arrays) w.r.t. each array.

    ``f`` must be a pure numpy function (no tape involvement) so the oracle
    stays independent of the reverse-mode path it checks.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(arrays)
            flat[i] = old - h
            fm = f(arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
