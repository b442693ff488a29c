"""Kernel backend selection.

The segment scatter-add is the one hot loop numpy does not cover well
(``np.add.at`` is an order of magnitude slower than a compiled loop).  A
Cython implementation is used when the compiled extension imports; the
environment variable ``METAGRAPH_KERNELS`` forces a backend:

* ``auto`` (default): compiled if available, numpy otherwise
* ``c``: compiled, raise if the extension is missing
* ``py``: numpy, never touch the extension

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np


def _scatter_add_rows_py(values, ids, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, ids, values)
    return out


_requested = os.environ.get("METAGRAPH_KERNELS", "auto")
if _requested not in ("auto", "c", "py"):
    raise ValueError(
        f"METAGRAPH_KERNELS must be 'auto', 'c' or 'py', got {_requested!r}"
    )

BACKEND = "py"
scatter_add_rows = _scatter_add_rows_py

if _requested in ("auto", "c"):
    try:
        from ._ckernels import scatter_add_rows as _scatter_add_rows_c
    except ImportError:
        if _requested == "c":
            raise ImportError(
                "METAGRAPH_KERNELS=c but the compiled extension is not built"
            )
    else:
        BACKEND = "c"
        scatter_add_rows = _scatter_add_rows_c
