"""Kernel selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``REIFENBERG_KERNELS=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("REIFENBERG_KERNELS", "").lower() != "python":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _fallback

greedy_select = _impl.greedy_select
greedy_coloring = _impl.greedy_coloring
mcshane = _impl.mcshane
pair_ratio_max = _impl.pair_ratio_max
flood_label = _impl.flood_label
nearest_dist_brute = _impl.nearest_dist_brute
ball_ratio_local = _impl.ball_ratio_local

__all__ = [
    "BACKEND",
    "greedy_select",
    "greedy_coloring",
    "mcshane",
    "pair_ratio_max",
    "flood_label",
    "nearest_dist_brute",
    "ball_ratio_local",
]
