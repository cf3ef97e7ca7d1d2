"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise the numpy
twin in ``_pykernels`` takes over. Set ``NEWTONOP_BACKEND=python`` to force
the fallback (the benchmark and the cross-backend tests do this per call
through :func:`get_backend`).
"""

import importlib
import os

_NAMES = {"cython": "newtonop._ckernels", "python": "newtonop._pykernels"}


def get_backend(name):
    if name not in _NAMES:
        raise ValueError(f"unknown backend {name!r}")
    return importlib.import_module(_NAMES[name])


def available_backends():
    out = []
    for name in _NAMES:
        try:
            get_backend(name)
        except ImportError:
            continue
        out.append(name)
    return out


def _select():
    wanted = os.environ.get("NEWTONOP_BACKEND", "").strip().lower()
    if wanted:
        return wanted, get_backend(wanted)
    try:
        return "cython", get_backend("cython")
    except ImportError:
        return "python", get_backend("python")


BACKEND, _impl = _select()

band_lu_factor = _impl.band_lu_factor
band_lu_solve = _impl.band_lu_solve
xoshiro_fill = _impl.xoshiro_fill
jacobi_eigh = _impl.jacobi_eigh
