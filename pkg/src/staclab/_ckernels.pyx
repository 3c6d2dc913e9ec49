# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels. Semantics match ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def linear_recurrence(x, k, bint reverse=True):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xs
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ks
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ys
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if x.shape != k.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {k.shape}")
    shape = x.shape
    if x.ndim == 0:
        raise ValueError("recurrence needs at least one axis")
    cdef Py_ssize_t T = shape[0]
    cdef Py_ssize_t B = x.size // T if T > 0 else 0
    xs = x.reshape(T, B)
    ks = k.reshape(T, B)
    ys = np.empty((T, B), dtype=np.float64)
    cdef Py_ssize_t t, b
    if T == 0:
        return ys.reshape(shape)
    # time outer, batch inner: rows are contiguous
    with nogil:
        if reverse:
            for b in range(B):
                ys[T - 1, b] = xs[T - 1, b]
            for t in range(T - 2, -1, -1):
                for b in range(B):
                    ys[t, b] = xs[t, b] + ks[t, b] * ys[t + 1, b]
        else:
            for b in range(B):
                ys[0, b] = xs[0, b]
            for t in range(1, T):
                for b in range(B):
                    ys[t, b] = xs[t, b] + ks[t, b] * ys[t - 1, b]
    return ys.reshape(shape)


def leaky_weights(ratios, double alpha, double clip):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out
    arr = np.ascontiguousarray(ratios, dtype=np.float64)
    shape = arr.shape
    r = arr.reshape(-1)
    out = np.empty_like(r)
    cdef Py_ssize_t i, n = r.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = r[i]
            out[i] = alpha * (clip if v > clip else v) + (1.0 - alpha) * v
    return out.reshape(shape)


def categorical_sample(probs, uniforms):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t B = p.shape[0], A = p.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(B, dtype=np.int64)
    cdef Py_ssize_t b, a
    cdef double total, acc, target
    with nogil:
        for b in range(B):
            total = 0.0
            for a in range(A):
                total += p[b, a]
            target = u[b] * total
            acc = 0.0
            out[b] = A - 1
            for a in range(A):
                acc += p[b, a]
                if acc >= target:
                    out[b] = a
                    break
    return out
