"""Backend selection for the hot loops.

The compiled extension is used when it imports; ``MWUF_PURE_PYTHON=1`` forces
the numpy fallback. Both expose the same three functions.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MWUF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

scatter_add_rows = _impl.scatter_add_rows
sparse_adam_rows = _impl.sparse_adam_rows
rank_auc_sorted = _impl.rank_auc_sorted


def available_backends():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return names + ["cython"]


def get_backend(name):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
