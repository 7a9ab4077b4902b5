"""Kernel backend selection.

The compiled extension ``flowmatch._core`` is preferred. Setting the
environment variable ``FLOWMATCH_PURE_PYTHON=1`` before import, or calling
:func:`use`, selects the numpy fallback in :mod:`flowmatch._pure`.
"""

import contextlib
import os

from . import _pure

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _pure}
if _core is not None:
    _BACKENDS["compiled"] = _core

_active = _pure if os.environ.get("FLOWMATCH_PURE_PYTHON") == "1" or _core is None else _core


def available():
    return sorted(_BACKENDS)


def name():
    return "compiled" if _active is _core and _core is not None else "python"


def kernels():
    return _active


def set_backend(backend):
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {available()}")
    _active = _BACKENDS[backend]


@contextlib.contextmanager
def use(backend):
    """Temporarily switch the kernel backend (not thread-safe)."""
    global _active
    saved = _active
    set_backend(backend)
    try:
        yield
    finally:
        _active = saved
