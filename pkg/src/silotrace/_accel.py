"""Backend selection for the numeric kernels.

Numba is used when importable unless ``SILOTRACE_DISABLE_NUMBA`` is set to a
truthy value, in which case every kernel runs its pure-numpy twin.
"""

import logging
import os

logger = logging.getLogger(__name__)

_FALSEY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install dependency
    numba = None
    HAVE_NUMBA = False

DISABLED_BY_ENV = os.environ.get("SILOTRACE_DISABLE_NUMBA", "").strip().lower() not in _FALSEY

_state = {"use_numba": HAVE_NUMBA and not DISABLED_BY_ENV}


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or identity when numba is missing."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def use_numba() -> bool:
    return _state["use_numba"]


def set_backend(name: str) -> None:
    """Force ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["use_numba"] = name == "numba"
    logger.debug("kernel backend set to %s", name)


def backend() -> str:
    return "numba" if use_numba() else "numpy"
