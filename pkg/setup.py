"""Build script for the optional compiled kernel core.

The extension is best-effort: if Cython or a C compiler is unavailable the
package still installs and falls back to the pure-numpy kernels at import
time.  -ffp-contract=off is mandatory: the kernels promise bit-identical
results to the fallback, which an FMA contraction would break.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext = Extension(
        "specexit.kernels._ckern",
        ["src/specexit/kernels/_ckern.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
