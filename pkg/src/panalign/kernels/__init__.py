"""Hot-kernel backend selection.

Two interchangeable backends exist: the compiled Cython extension and a
pure-numpy fallback. Measured on training-sized inputs (see
``benchmarks/bench_kernels.py``), BLAS-backed im2col convolution beats
the compiled loops while the compiled pooling and bilinear kernels beat
their numpy twins by ~10x, so ``auto`` mixes per kernel. Set
``PANALIGN_KERNELS`` to ``numpy``, ``cython`` or ``auto`` (default) to
override; ``numpy`` always works, ``cython`` requires the extension.
"""

import os

from . import numpy_backend

try:
    from . import _fastkern
except ImportError:
    _fastkern = None

_choice = os.environ.get("PANALIGN_KERNELS", "auto").lower()

if _choice == "cython":
    if _fastkern is None:
        raise ImportError(
            "PANALIGN_KERNELS=cython but the compiled extension is unavailable"
        )
    _conv = _pool = _bilinear = _fastkern
    backend_name = "cython"
elif _choice == "numpy" or (_choice == "auto" and _fastkern is None):
    _conv = _pool = _bilinear = numpy_backend
    backend_name = "numpy"
elif _choice == "auto":
    _conv = numpy_backend
    _pool = _bilinear = _fastkern
    backend_name = "mixed"
else:
    raise ValueError(f"unknown PANALIGN_KERNELS value: {_choice!r}")

conv2d_forward = _conv.conv2d_forward
conv2d_backward = _conv.conv2d_backward
maxpool2_forward = _pool.maxpool2_forward
maxpool2_backward = _pool.maxpool2_backward
bilinear_forward = _bilinear.bilinear_forward
bilinear_backward = _bilinear.bilinear_backward
