"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  ``set_backend`` switches explicitly (tests and benchmarks).
"""
from __future__ import annotations

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _BACKENDS.get("cython", _pykernels)


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _active = _BACKENDS[name]


def assemble_bands(h, pq, cq):
    return _active.assemble_bands(
        np.ascontiguousarray(h, dtype=float),
        np.ascontiguousarray(pq, dtype=float),
        np.ascontiguousarray(cq, dtype=float),
    )


def directed_hausdorff(A, B, seed: int = 0, ordered: bool = False):
    """Directed Hausdorff distance max_a min_b |a - b| with the witnessing pair.

    ``ordered`` declares both sets to be consecutive samples along curves,
    enabling the locality scan; otherwise rows are visited in random order.
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("point sets must be 2D arrays with equal column counts")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("empty point set")
    if ordered:
        oa = np.arange(A.shape[0], dtype=np.intp)
        ob = np.arange(B.shape[0], dtype=np.intp)
    else:
        rng = np.random.default_rng(seed)
        oa = rng.permutation(A.shape[0]).astype(np.intp)
        ob = rng.permutation(B.shape[0]).astype(np.intp)
    return _active.directed_hausdorff(A, B, oa, ob, ordered)


def reduced_flow(data, V0, nsteps: int, dt: float, want_jac: bool = False):
    return _active.reduced_flow(data, V0, int(nsteps), float(dt), bool(want_jac))


def reduced_rhs(data, V, want_jac: bool = False):
    """One evaluation of the reduced vector field (cold warm start)."""
    V = np.array(V, dtype=float, ndmin=2)
    B, m = V.shape
    n = data.phi.shape[0]
    stats = {"iters": 0, "residual": 0.0, "ratio": 0.0}
    Z = np.zeros((B, n))
    dZ = np.zeros((B, n, m))
    F, DF = _pykernels.reduced_rhs(data, V, Z, dZ, want_jac, stats)
    return F, DF, Z, stats


KernelData = _pykernels._Data
