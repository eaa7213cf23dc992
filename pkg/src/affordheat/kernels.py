"""Backend selection for the mask/polygon kernels.

The compiled extension is preferred; set ``AFFORDHEAT_PURE_PYTHON=1`` to force
the numpy/scipy fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("AFFORDHEAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND = _active.BACKEND
boundary = _active.boundary
directed_distances = _active.directed_distances
points_in_polygon = _active.points_in_polygon
label4 = _active.label4


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
