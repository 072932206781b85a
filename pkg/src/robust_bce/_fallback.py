"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation (same accumulation
order) so both backends return bit-identical results.
"""

import numpy as np

_BLOCK = 512


def range_predict(states, epochs, beacons):
    """Predicted ranges ``|p - b| + bias`` and their state gradients."""
    states = np.asarray(states, dtype=np.float64)
    epochs = np.asarray(epochs, dtype=np.int64)
    beacons = np.asarray(beacons, dtype=np.float64)
    ndim = beacons.shape[1]
    pos = states[epochs, :ndim]
    diff = pos - beacons
    dist2 = np.zeros(len(epochs))
    for c in range(ndim):
        dist2 += diff[:, c] * diff[:, c]
    dist = np.sqrt(dist2)
    pred = dist + states[epochs, ndim]
    grad = np.zeros((len(epochs), states.shape[1]))
    nz = dist > 0.0
    grad[nz, :ndim] = diff[nz] / dist[nz, None]
    grad[:, ndim] = 1.0
    return pred, grad


def knn_search(data, k):
    """Brute-force k nearest neighbours (self excluded, ties to lower index)."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    n, ndim = data.shape
    idx = np.empty((n, k), dtype=np.int64)
    d2 = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, _BLOCK):
        stop = min(n, start + _BLOCK)
        block = np.zeros((stop - start, n))
        for c in range(ndim):
            delta = data[start:stop, c, None] - data[None, :, c]
            block += delta * delta
        block[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(block, axis=1, kind="stable")[:, :k]
        idx[start:stop] = order
        d2[start:stop] = np.take_along_axis(block, order, axis=1)
    return idx, d2


def quad_forms(data, means, factors):
    """``out[n, m] = |(x_n - mu_m) @ A_m|^2`` for lower-triangular ``A_m``."""
    data = np.asarray(data, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    n, ndim = data.shape
    out = np.zeros((n, means.shape[0]))
    for m in range(means.shape[0]):
        diff = data - means[m]
        for j in range(ndim):
            proj = np.zeros(n)
            for i in range(j, ndim):
                proj += diff[:, i] * factors[m, i, j]
            out[:, m] += proj * proj
    return out
