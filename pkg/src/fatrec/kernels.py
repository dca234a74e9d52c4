"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``FATREC_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementations are used.
"""
from __future__ import annotations

import os

from . import _kernels_py

_force_py = os.environ.get("FATREC_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend forced")
    from . import _kernels as _impl  # type: ignore[attr-defined]

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
route_forward = _impl.route_forward
route_backward = _impl.route_backward
squash = _impl.squash


def backend_module(name: str):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels  # type: ignore[attr-defined]

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
