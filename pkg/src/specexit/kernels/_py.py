"""Pure-numpy kernel backend.

The loops run over the contraction axis so every output element accumulates
in the same left-to-right order as the compiled backend: one float32
rounding per product, one per addition.
"""

import numpy as np


def matmul_f32(a, b):
    k = a.shape[1]
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for i in range(k):
        out += a[:, i : i + 1] * b[i, :]
    return out


def seq_sum_f32(x):
    n = x.shape[1]
    acc = np.zeros(x.shape[0], dtype=np.float32)
    for i in range(n):
        acc += x[:, i]
    return acc
