"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it was built and ``STACLAB_PURE_PYTHON``
is unset. ``BACKEND`` reports which one was picked.
"""

import os

from staclab import _pykernels

_ckernels = None
if not os.environ.get("STACLAB_PURE_PYTHON"):
    try:
        from staclab import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

_impl = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _ckernels is not None else "python"

linear_recurrence = _impl.linear_recurrence
leaky_weights = _impl.leaky_weights
categorical_sample = _impl.categorical_sample


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out
