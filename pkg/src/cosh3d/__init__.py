"""Linear-complexity cosh-attention with a 3D proposal-refinement pipeline.

The attention kernels run on a compiled extension when it was built and
fall back to NumPy otherwise; ``cosh3d.backend.active_backend()`` reports
which one is live.
"""

from .backend import active_backend, available_backends, get_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "available_backends", "get_backend", "__version__"]
