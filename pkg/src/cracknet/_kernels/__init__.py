"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built and imports cleanly; setting
``CRACKNET_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("CRACKNET_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"


def use_backend(name):
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global _active, BACKEND
    if name == "cython":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built")
        _active = compiled_backend
    elif name == "python":
        _active = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def im2col(xp, kh, kw, stride, ho, wo):
    return _active.im2col(xp, kh, kw, stride, ho, wo)


def col2im(cols, b, hp, wp, c, kh, kw, stride, ho, wo):
    return _active.col2im(cols, b, hp, wp, c, kh, kw, stride, ho, wo)


def lovasz_grad(gt_sorted):
    return _active.lovasz_grad(gt_sorted)
