"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (pure-numpy fallback is selected
at import time), so a failed compile downgrades to a warning instead of
aborting the install.
"""

import sys

import numpy as np
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/panalign/kernels/_fastkern.pyx",
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: skipping Cython kernel build ({exc})", file=sys.stderr)

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)
