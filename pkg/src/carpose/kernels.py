"""Backend selection for the compiled kernels.

The Cython extension ``_kernels`` is used when it was built; otherwise the
pure-Python ``_kernels_py`` is selected at import. Both produce identical
results. ``set_backend`` switches explicitly (used by the benchmark and the
cross-backend tests); there is deliberately no environment override.
"""

from __future__ import annotations

from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels

_active_name = "compiled" if _kernels is not None else "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    _active_name = name


def active() -> ModuleType:
    return _BACKENDS[_active_name]
