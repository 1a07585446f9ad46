"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when the
``AIF_PURE_PYTHON`` environment variable is set, the numpy fallback is used.
Both backends are bit-identical, so the choice only affects speed.
"""
import logging
import os

import numpy as np

from . import _fallback

logger = logging.getLogger(__name__)


def _load_compiled():
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = None if os.environ.get("AIF_PURE_PYTHON") else _load_compiled()

if _compiled is None:
    _impl = _fallback
    BACKEND = "python"
    logger.debug("compiled kernels unavailable, using numpy fallback")
else:
    _impl = _compiled
    BACKEND = "compiled"


def available_backends():
    names = ["python"]
    if _load_compiled() is not None:
        names.append("compiled")
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "compiled")."""
    if name == "python":
        return _fallback
    if name == "compiled":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled kernels are not built")
        return mod
    raise ValueError(f"unknown backend {name!r}")


def matmul_nt(a, bt):
    a = np.ascontiguousarray(a, dtype=np.float32)
    bt = np.ascontiguousarray(bt, dtype=np.float32)
    return _impl.matmul_nt(a, bt)


def similarity_matrix(a, b, lut, nbits):
    a = np.ascontiguousarray(a, dtype=np.uint8)
    b = np.ascontiguousarray(b, dtype=np.uint8)
    lut = np.ascontiguousarray(lut, dtype=np.uint8)
    return _impl.similarity_matrix(a, b, lut, int(nbits))


def simtier_counts(sims, n_tiers):
    sims = np.ascontiguousarray(sims, dtype=np.float32)
    return _impl.simtier_counts(sims, int(n_tiers))
