"""Pick the compiled t-SNE kernels when available, else the numpy fallback.

Set ``ECHO_PURE_PYTHON=1`` to force the fallback.
"""
import os
from types import SimpleNamespace

from . import _tsne_py

BACKEND = "python"
conditional_p = _tsne_py.conditional_p
kl_gradient = _tsne_py.kl_gradient

try:
    from . import _tsne_core
except ImportError:
    _tsne_core = None

if _tsne_core is not None and os.environ.get("ECHO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "cython"
    conditional_p = _tsne_core.conditional_p
    kl_gradient = _tsne_core.kl_gradient


def available() -> dict:
    """Every importable backend by name, for benchmarks and cross-checks."""
    out = {"python": SimpleNamespace(conditional_p=_tsne_py.conditional_p, kl_gradient=_tsne_py.kl_gradient)}
    if _tsne_core is not None:
        out["cython"] = SimpleNamespace(conditional_p=_tsne_core.conditional_p,
                                        kl_gradient=_tsne_core.kl_gradient)
    return out
