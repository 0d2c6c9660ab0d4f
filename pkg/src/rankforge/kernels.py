"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Set ``RANKFORGE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

_NAMES = (
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "attention_forward",
    "attention_backward",
    "scatter_add_rows",
    "point_ce",
    "pair_logistic",
    "softmax_ce",
    "poly1_softmax_ce",
)


def _load():
    if os.environ.get("RANKFORGE_PURE_PYTHON", "") not in ("", "0"):
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "compiled"


_impl, BACKEND = _load()

layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
scatter_add_rows = _impl.scatter_add_rows
point_ce = _impl.point_ce
pair_logistic = _impl.pair_logistic
softmax_ce = _impl.softmax_ce
poly1_softmax_ce = _impl.poly1_softmax_ce


def backend_module(name):
    """Return the kernel module for ``"python"`` or ``"compiled"``."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
