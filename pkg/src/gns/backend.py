"""Selects the kernel backend at import time.

Uses the compiled extension (gns._ckernels) when present, otherwise the
pure numpy fallback (gns._pykernels). Set GNS_PURE_PYTHON=1 to force the
fallback, e.g. for benchmarking or debugging.
"""

import os

if os.environ.get("GNS_PURE_PYTHON"):
    from gns import _pykernels as kernels
else:
    try:
        from gns import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        from gns import _pykernels as kernels  # type: ignore[no-redef]

COMPILED = bool(kernels.COMPILED)

scatter_sum = kernels.scatter_sum
tree_radius_query = kernels.tree_radius_query
tree_radius_pairs = kernels.tree_radius_pairs


def name() -> str:
    return "compiled" if COMPILED else "pure"
