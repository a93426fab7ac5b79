"""Backend selection for the LIF time scan.

The compiled kernel is used when it was built; setting ``SPIKEALIGN_PURE=1``
forces the numpy fallback.
"""
import os

from . import _lifscan_py

BACKENDS = {"python": _lifscan_py}

try:
    from . import _lifscan as _compiled
except ImportError:
    _compiled = None
else:
    BACKENDS["compiled"] = _compiled

if _compiled is not None and os.environ.get("SPIKEALIGN_PURE") != "1":
    BACKEND = "compiled"
else:
    BACKEND = "python"

kernel = BACKENDS[BACKEND]


def get_backend(name: str):
    try:
        return BACKENDS[name]
    except KeyError:
        raise ImportError(f"LIF backend {name!r} is not available") from None
