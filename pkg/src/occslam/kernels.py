"""Backend selection for the hot kernels.

The compiled module is used when it was built; ``OCCSLAM_PURE_PYTHON=1``
forces the pure-Python fallback.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        name = BACKEND
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built (pip install -e . --no-build-isolation)")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


if os.environ.get("OCCSLAM_PURE_PYTHON") == "1" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
