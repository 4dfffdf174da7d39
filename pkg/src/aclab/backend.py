"""Kernel backend selection.

The hot numerical kernels exist twice: a compiled Cython core
(aclab._ckernels) and a NumPy reference (aclab._kernels_np). The compiled
core is used when it was built; ACLAB_KERNELS=numpy|compiled forces the
choice, and `compiled` raises if the extension is missing.
"""

from __future__ import annotations

import os

_choice = os.environ.get("ACLAB_KERNELS", "auto")
if _choice not in ("auto", "numpy", "compiled"):
    raise RuntimeError(f"ACLAB_KERNELS must be auto|numpy|compiled, got {_choice!r}")

if _choice == "numpy":
    from . import _kernels_np as kernels

    BACKEND = "numpy"
else:
    try:
        from . import _ckernels as kernels  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError as exc:
        if _choice == "compiled":
            raise RuntimeError("ACLAB_KERNELS=compiled but aclab._ckernels is not built") from exc
        from . import _kernels_np as kernels

        BACKEND = "numpy"


def available_backends():
    """Names of the kernel backends importable in this environment."""
    out = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401

        out.append("compiled")
    except ImportError:
        pass
    return out


def load_backend(name):
    """Import a specific kernel module, independent of the global choice."""
    if name == "numpy":
        from . import _kernels_np

        return _kernels_np
    if name == "compiled":
        from . import _ckernels  # type: ignore[attr-defined]

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
