"""Hot kernels: compiled extension when built, numpy fallback otherwise.

Set ``WOSS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from woss import _kernels_py as python_kernels

compiled_kernels = None
if not os.environ.get("WOSS_PURE_PYTHON"):
    try:
        from woss import _kernels as compiled_kernels
    except ImportError:
        compiled_kernels = None

_impl = compiled_kernels or python_kernels
BACKEND = "cython" if compiled_kernels is not None else "python"

chunk_digest = _impl.chunk_digest
scatter_slots = _impl.scatter_slots
