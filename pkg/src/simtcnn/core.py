"""Accumulation kernels, compiled when available.

``simtcnn._core`` (Cython) is used when it imports; otherwise the numpy
implementation in ``simtcnn._fallback`` takes over. Setting
``SIMTCNN_PURE_PYTHON=1`` forces the fallback. Both produce identical bits.
"""

import os

from . import _fallback

SEPARATE, FUSED, TREE = 0, 1, 2

_MODES = {"separate": SEPARATE, "fused": FUSED, "tree": TREE}


def _load():
    if os.environ.get("SIMTCNN_PURE_PYTHON", "") not in ("", "0"):
        return _fallback
    try:
        from . import _core
    except ImportError:
        return _fallback
    return _core


backend = _load()
IMPLEMENTATION = backend.IMPLEMENTATION
HAVE_COMPILED = IMPLEMENTATION == "compiled"


def mode_code(mode):
    """Map an accumulation tag (or code) to the integer the kernels take."""
    if isinstance(mode, int) and mode in (SEPARATE, FUSED, TREE):
        return mode
    tag = getattr(mode, "tag", mode)
    try:
        return _MODES[tag]
    except (KeyError, TypeError):
        raise ValueError(f"unknown accumulation mode {mode!r}") from None


def implementations():
    """Every importable kernel implementation, keyed by name."""
    impls = {"python": _fallback}
    try:
        from . import _core
    except ImportError:
        pass
    else:
        impls["compiled"] = _core
    return impls


ordered_sum = backend.ordered_sum
phi = backend.phi
phi_array = backend.phi_array
conv_layer = backend.conv_layer
fc_layer = backend.fc_layer
fc_layer_lanes = backend.fc_layer_lanes
