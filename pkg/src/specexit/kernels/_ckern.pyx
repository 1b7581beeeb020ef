# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Accumulation is strictly left-to-right in float32, matching _py.py
operation for operation.  The build passes -ffp-contract=off so the
product/add pair is never fused into an FMA.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def matmul_f32(cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] a,
               cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] out = \
        np.zeros((m, n), dtype=np.float32)
    cdef Py_ssize_t i, j, c
    cdef float aik, p
    for i in range(m):
        for j in range(k):
            aik = a[i, j]
            for c in range(n):
                p = aik * b[j, c]
                out[i, c] = out[i, c] + p
    return out


def seq_sum_f32(cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] x):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] out = \
        np.zeros(m, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef float acc
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc = acc + x[i, j]
        out[i] = acc
    return out
