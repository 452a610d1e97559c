"""Kernel backend selection.

The compiled extension is used when importable; ``ACPO_PURE_PYTHON=1``
forces the pure-Python fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("ACPO_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

sample_tokens = _impl.sample_tokens
score_tokens = _impl.score_tokens
next_distribution = _impl.next_distribution
accumulate_grad = _impl.accumulate_grad
layout = _pykernels.layout


def backend(name: str):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend: {name}")
