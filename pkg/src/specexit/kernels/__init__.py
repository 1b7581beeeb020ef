"""Deterministic float32 reduction kernels with backend selection.

Two interchangeable backends provide the only reduction primitives used on
the inference path:

* ``matmul(a, b)``   -- float32 matrix product with strict left-to-right
  accumulation over the contraction axis.
* ``seq_sum(x)``     -- float32 left-to-right sum over the last axis.

Both backends perform the identical sequence of IEEE single-precision
operations, so results are bit-identical between them.  Everything else on
the inference path (exp, sqrt, elementwise arithmetic) goes through the
same numpy calls regardless of backend.

The compiled backend (``_ckern``, Cython) is picked automatically when the
extension built; set SPECEXIT_KERNELS=py or =c to force a choice.
"""

import os

import numpy as np

from . import _py

_BACKENDS = {"py": _py}
try:
    from . import _ckern

    _BACKENDS["c"] = _ckern
except ImportError:
    _ckern = None

_active = None


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active


def set_backend(name):
    """Select the kernel backend ('py' or 'c'). Returns the previous name."""
    global _active, _matmul_impl, _seq_sum_impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    prev = _active
    mod = _BACKENDS[name]
    _matmul_impl = mod.matmul_f32
    _seq_sum_impl = mod.seq_sum_f32
    _active = name
    return prev


def matmul(a, b):
    """Strict-order float32 matmul: C[i,j] = sum_k A[i,k]*B[k,j], k ascending."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _matmul_impl(a, b)


def seq_sum(x):
    """Strict left-to-right float32 sum over the last axis."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim == 0:
        raise ValueError("seq_sum needs at least one axis")
    return _seq_sum_impl(x.reshape(-1, x.shape[-1])).reshape(x.shape[:-1])


set_backend(os.environ.get("SPECEXIT_KERNELS", "c" if _ckern is not None else "py"))
