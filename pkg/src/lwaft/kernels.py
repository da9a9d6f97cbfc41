"""Backend selection for the edit-distance hot loop.

The compiled extension is used when it was built; otherwise the bit-parallel
pure-Python implementation is used. Set ``LWAFT_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os

from . import _editdist_py

BACKEND = "python"
levenshtein = _editdist_py.levenshtein
levenshtein_many = _editdist_py.levenshtein_many

if os.environ.get("LWAFT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _editdist  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        levenshtein = _editdist.levenshtein
        levenshtein_many = _editdist.levenshtein_many

__all__ = ["BACKEND", "levenshtein", "levenshtein_many"]
