"""Backend selection for the convolution kernels.

The compiled extension is preferred; the numpy fallback is used when it is not
built or when ``PLASM_KERNELS=python`` is set before import.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PLASM_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _native
    except ImportError:
        if os.environ.get("PLASM_KERNELS", "").lower() == "native":
            raise
    else:
        _impl = _native
        BACKEND = "native"


def use(backend):
    """Switch the active backend at runtime ("native" or "python")."""
    global _impl, BACKEND
    if backend == "python":
        _impl = _kernels_py
    elif backend == "native":
        from . import _kernels as native

        _impl = native
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")
    BACKEND = backend


def native_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def im2col(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, c, h, w, k, stride, pad):
    return _impl.col2im(cols, c, h, w, k, stride, pad)


def dwconv_forward(x, w, pad):
    return _impl.dwconv_forward(x, w, pad)


def dwconv_backward(x, w, gy, pad):
    return _impl.dwconv_backward(x, w, gy, pad)


def gn_act_forward(x, gamma, beta, groups, eps, slope):
    return _impl.gn_act_forward(x, gamma, beta, groups, eps, slope)


def gn_act_backward(gy, xhat, inv, gamma, beta, groups, slope):
    return _impl.gn_act_backward(gy, xhat, inv, gamma, beta, groups, slope)
