"""Numeric kernels with a compiled core and a NumPy fallback.

Two implementations of the same two primitives exist:

* ``_native`` -- Cython extension, built by ``setup.py`` (optional).
* ``_numpy`` -- vectorized NumPy fallback, always available.

The backend is chosen once at import time. Set ``ACTIVATED_SR_KERNELS`` to
``native`` or ``numpy`` to force one (``native`` raises if the extension is
missing); the default ``auto`` prefers the compiled core.

Primitives (identical contracts in both backends):

* ``apply_weights_axis0(arr, idx, w)`` -- gather rows of a 2-D array by an
  index table and reduce them with a weight table; the row-resampling step
  of separable filtering.
* ``gauss_valid(arr, k)`` -- separable valid-mode correlation of a 2-D array
  with a symmetric 1-D kernel, used for windowed SSIM statistics.
"""

import os

from . import _numpy

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_choice = os.environ.get("ACTIVATED_SR_KERNELS", "auto").lower()
if _choice == "numpy":
    _impl = _numpy
elif _choice == "native":
    if _native is None:
        raise ImportError(
            "ACTIVATED_SR_KERNELS=native but the compiled extension is not "
            "available; build it with 'pip install -e .' or unset the variable"
        )
    _impl = _native
else:
    _impl = _native if _native is not None else _numpy

BACKEND = "native" if _impl is _native else "numpy"

apply_weights_axis0 = _impl.apply_weights_axis0
gauss_valid = _impl.gauss_valid


def available_backends():
    """Names of the importable kernel implementations."""
    return ("native", "numpy") if _native is not None else ("numpy",)


def get_impl(name):
    """Return a specific backend module by name (for tests and benchmarks)."""
    if name == "numpy":
        return _numpy
    if name == "native":
        if _native is None:
            raise ImportError("compiled kernel extension is not built")
        return _native
    raise ValueError(f"unknown kernel backend {name!r}")
