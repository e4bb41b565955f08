"""Backend selection for the hot loops.

The compiled extension is used when it imports; ``ADJAUTO_PURE=1`` forces
the pure-Python fallback.  ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

if os.environ.get("ADJAUTO_PURE", "") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

Graph = _impl.Graph
Flags = _impl.Flags
clock_dp = _impl.clock_dp
backward_induction = _impl.backward_induction
propagate_forward = _impl.propagate_forward
propagate_reverse = _impl.propagate_reverse
solve_forbidding = _impl.solve_forbidding
simulate = _impl.simulate

__all__ = ["BACKEND", "Graph", "Flags", "clock_dp", "backward_induction", "propagate_forward", "propagate_reverse", "solve_forbidding", "simulate"]
