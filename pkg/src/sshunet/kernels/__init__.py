"""Hot inner loops, numba-compiled when available.

Set ``SSHUNET_BACKEND=numpy`` to force the pure-numpy path (useful for
debugging or on platforms without numba). Both paths share signatures and
are tested against each other.
"""

import os

from . import _numpy as numpy_impl

KERNELS = ("im2col", "col2im", "instance_stats", "min_distances")

_requested = os.environ.get("SSHUNET_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"SSHUNET_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

numba_impl = None
if _requested == "numba":
    try:
        from . import _numba as numba_impl
    except ImportError:  # pragma: no cover - numba missing
        numba_impl = None

BACKEND = "numba" if numba_impl is not None else "numpy"
_active = numba_impl if numba_impl is not None else numpy_impl

# numpy's strided gather + one contiguous copy beats the numba loop for
# im2col (see benchmarks/bench_kernels.py), so both backends use it
im2col = numpy_impl.im2col
col2im = _active.col2im
instance_stats = _active.instance_stats
min_distances = _active.min_distances
