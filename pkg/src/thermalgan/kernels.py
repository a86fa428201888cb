"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``THERMALGAN_PURE=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("THERMALGAN_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback

im2col = _impl.im2col
col2im = _impl.col2im
conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight


def backend(name):
    """Return the kernel module for ``name`` ("compiled" or "numpy")."""
    if name == "numpy":
        return _fallback
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
