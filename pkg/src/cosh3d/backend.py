"""Kernel backend selection.

The compiled extension is preferred when it was built; the NumPy fallback
is always available.  ``COSH3D_BACKEND=python`` (or ``=compiled``) in the
environment forces the choice at import time, and every dispatching
function accepts a ``backend=`` name to override per call.
"""

import os

from . import _core_py

try:
    from . import _core
except ImportError:
    _core = None

HAVE_COMPILED = _core is not None

_BACKENDS = {"python": _core_py}
if HAVE_COMPILED:
    _BACKENDS["compiled"] = _core


def get_backend(name=None):
    """Resolve a backend module from a name ('python', 'compiled', None=active)."""
    if name is None:
        return _active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown backend {name!r}; available: {', '.join(sorted(_BACKENDS))}"
        ) from None


def available_backends():
    return tuple(sorted(_BACKENDS))


def active_backend():
    """Name of the backend used when no explicit override is given."""
    return _active.BACKEND_NAME


_env = os.environ.get("COSH3D_BACKEND", "").strip().lower()
if _env:
    _active = get_backend(_env)
elif HAVE_COMPILED:
    _active = _core
else:
    _active = _core_py
