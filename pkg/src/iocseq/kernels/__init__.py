"""Hot kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it was built and ``IOCSEQ_PURE`` is not set.
``BACKEND`` names the implementation that was selected at import time.
"""

import os

from . import _pykernels as pure

if os.environ.get("IOCSEQ_PURE"):
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "numpy"

scatter_add_rows = _impl.scatter_add_rows
best_gini_split = _impl.best_gini_split

__all__ = ["BACKEND", "best_gini_split", "compiled", "pure", "scatter_add_rows"]
