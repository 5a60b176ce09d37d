"""Hot-loop kernels, compiled when available.

The Cython module ``_ckernels`` is used if it was built at install time;
otherwise the pure-Python ``_kernels_py`` takes over.  Set
``STREAMST_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("STREAMST_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

fire_walk = _impl.fire_walk
fire_walk_batch = _impl.fire_walk_batch
lagging = _impl.lagging
