"""Backend switch for the hot numeric kernels.

Set ``KSVQE_NUMBA=0`` to force the pure-numpy path. When numba is missing the
numpy path is used regardless.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "KSVQE_NUMBA"


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "off", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a passthrough when numba is unavailable."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def resolve_backend(backend: str | None) -> str:
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
