"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` exactly and are used when the compiled
extension is missing or ``STACLAB_PURE_PYTHON`` is set.
"""

import numpy as np


def linear_recurrence(x, k, reverse=True):
    """Solve ``y[t] = x[t] + k[t] * y[t +/- 1]`` along axis 0.

    With ``reverse=True`` the recursion runs from the last step backwards and
    ``y[T] = 0``; otherwise it runs forwards with ``y[-1] = 0``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if x.shape != k.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {k.shape}")
    y = np.empty_like(x)
    T = x.shape[0]
    if T == 0:
        return y
    if reverse:
        acc = np.zeros(x.shape[1:], dtype=np.float64)
        for t in range(T - 1, -1, -1):
            acc = x[t] + k[t] * acc
            y[t] = acc
    else:
        acc = np.zeros(x.shape[1:], dtype=np.float64)
        for t in range(T):
            acc = x[t] + k[t] * acc
            y[t] = acc
    return y


def leaky_weights(ratios, alpha, clip):
    """``alpha * min(clip, ratios) + (1 - alpha) * ratios`` elementwise."""
    ratios = np.asarray(ratios, dtype=np.float64)
    return alpha * np.minimum(clip, ratios) + (1.0 - alpha) * ratios


def categorical_sample(probs, uniforms):
    """Inverse-CDF sampling, one draw per row of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < np.asarray(uniforms, dtype=np.float64)[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)
