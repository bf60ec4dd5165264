"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports cleanly, unless ``MPMFIT_NO_EXT=1``
is set. ``BACKEND`` names the active implementation ("cython" or "numpy").
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_impl = _pykernels
BACKEND = "numpy"
if os.environ.get("MPMFIT_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError as exc:  # extension not built
        log.debug("compiled kernels unavailable (%s); using numpy fallback", exc)

p2g = _impl.p2g
g2p = _impl.g2p
g2p_backward = _impl.g2p_backward
p2g_backward = _impl.p2g_backward
render_forward = _impl.render_forward
render_backward = _impl.render_backward
nearest = _impl.nearest

__all__ = ["BACKEND", "p2g", "g2p", "g2p_backward", "p2g_backward",
           "render_forward", "render_backward", "nearest"]
