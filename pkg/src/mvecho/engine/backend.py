"""Select the convolution kernel implementation at import time.

The compiled extension is used when it was built and ``MVECHO_PURE_PYTHON``
is not set to ``1``. :func:`use` switches at runtime (tests and benchmarks
run both paths).
"""

import os

from mvecho.engine import _kernels_py

try:
    from mvecho.engine import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_IMPLS = {"python": _kernels_py}
if _ckernels is not None:
    _IMPLS["compiled"] = _ckernels

kernels = _kernels_py
name = "python"


def available():
    return sorted(_IMPLS)


def use(which):
    """Activate ``"compiled"`` or ``"python"`` kernels; returns the previous name."""
    global kernels, name
    if which not in _IMPLS:
        raise ValueError(f"kernel backend {which!r} unavailable; have {available()}")
    prev = name
    kernels, name = _IMPLS[which], which
    return prev


if _ckernels is not None and os.environ.get("MVECHO_PURE_PYTHON", "0") != "1":
    use("compiled")
