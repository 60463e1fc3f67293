"""Hot-loop kernels (convolution lowering, fused norm + activation).

The Cython extension is used when it was built; otherwise, or when the
environment variable ``CONDISTFL_PURE_PYTHON`` is set to a non-empty value,
the numpy implementation is selected. ``BACKEND`` names the active one.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("CONDISTFL_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _active is compiled_backend else "numpy"

im2col = _active.im2col
col2im = _active.col2im
output_extent = _active.output_extent
norm_act_forward = _active.norm_act_forward
norm_act_backward = _active.norm_act_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "output_extent",
    "norm_act_forward",
    "norm_act_backward",
    "python_backend",
    "compiled_backend",
]
