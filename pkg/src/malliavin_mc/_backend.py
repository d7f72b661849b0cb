"""Kernel backend selection.

The compiled extension is used when importable; set ``MALLIAVIN_MC_BACKEND``
to ``python`` to force the numpy fallback (or ``cython`` to fail loudly when
the extension is missing).
"""
import importlib
import os

from . import _pykernels


def load(name=None):
    """Return the kernel module for ``name`` ("cython", "python" or None=auto)."""
    name = (name or os.environ.get("MALLIAVIN_MC_BACKEND", "auto")).lower()
    if name == "python":
        return _pykernels
    try:
        return importlib.import_module("malliavin_mc._ckernels")
    except ImportError:
        if name == "cython":
            raise
        return _pykernels


kernels = load()


def available():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        importlib.import_module("malliavin_mc._ckernels")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names
