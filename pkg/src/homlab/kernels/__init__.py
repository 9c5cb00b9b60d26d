"""Kernel backend selection.

The compiled extension covers the hot inner loops (path stepping and the
counter-based random stream) for the shipped medium kinds; everything else,
and any medium the extension does not know, runs on the pure-numpy backend.
Set ``HOMLAB_KERNEL=numpy`` or ``HOMLAB_KERNEL=cython`` to force a backend
(``cython`` raises if the extension is unavailable).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numpy_backend
from .numpy_backend import (  # noqa: F401  (stream constants are part of the API)
    PURPOSE_COLOR_T,
    PURPOSE_COLOR_X1,
    PURPOSE_COLOR_X2,
    PURPOSE_INIT,
    PURPOSE_MISC,
    PURPOSE_NOISE,
    PURPOSE_TIMENOISE,
    PURPOSE_USHIFT,
)

try:
    from . import _speedups
except ImportError:  # pragma: no cover - build-dependent
    _speedups = None

_forced = os.environ.get("HOMLAB_KERNEL", "").strip().lower()
if _forced == "numpy":
    _speedups = None
elif _forced == "cython" and _speedups is None:
    raise ImportError("HOMLAB_KERNEL=cython but homlab.kernels._speedups is not built")

HAVE_SPEEDUPS = _speedups is not None
BACKEND = "cython" if HAVE_SPEEDUPS else "numpy"

_KIND_IDS = {"constant": 0, "trig1d": 1, "trig1dt": 2, "periodic31": 3,
             "chessboard": 4, "trig1dw": 5}

_EMPTY_I8 = np.zeros(0, dtype=np.int8)
_EMPTY_F8 = np.zeros(0, dtype=np.float64)


@dataclass
class KernelPayload:
    """Everything a backend needs to step one medium.

    ``drift``/``sigma`` (and control variants) are vectorized callables
    ``(t:(P,), x:(P,d)) -> (P,d) / (P,d,d)`` used by the numpy backend and by
    generic observation code. ``kind``/``scalars``/array fields feed the
    compiled kernel when it supports the kind.
    """

    kind: str
    dim: int
    drift: Callable
    sigma: Callable
    drift_control: Callable
    sigma_control: Callable
    scalars: np.ndarray = field(default_factory=lambda: _EMPTY_F8)
    colors_t: np.ndarray = field(default_factory=lambda: _EMPTY_I8)
    colors_1: np.ndarray = field(default_factory=lambda: _EMPTY_I8)
    lo_t: int = 0
    lo_1: int = 0
    cheb: np.ndarray = field(default_factory=lambda: _EMPTY_F8)
    compiled_ok: bool = True


class ExtentError(RuntimeError):
    """A path left the sampled extent of a finite random medium."""


def philox4x32(c0, c1, c2, c3, k0, k1):
    if HAVE_SPEEDUPS:
        return _speedups.philox4x32(c0, c1, c2, c3, k0, k1)
    return numpy_backend.philox4x32(c0, c1, c2, c3, k0, k1)


def normals(seed, paths, step, purpose, n):
    if HAVE_SPEEDUPS:
        return _speedups.normals(seed, np.asarray(paths, dtype=np.uint64), step, purpose, n)
    return numpy_backend.normals(seed, paths, step, purpose, n)


def uniforms(seed, paths, step, purpose, n):
    if HAVE_SPEEDUPS:
        return _speedups.uniforms(seed, np.asarray(paths, dtype=np.uint64), step, purpose, n)
    return numpy_backend.uniforms(seed, paths, step, purpose, n)


def em_paths(payload: KernelPayload, seed, paths, x0, shift_t, shift_x, step0,
             dt, n_steps, rec_stride=1, control=False, delta=None,
             state=None, s_state=None):
    """Step a batch of paths; see :func:`numpy_backend.em_paths` for the contract.

    ``state``/``s_state`` allow chunked continuation: pass the arrays returned
    by a previous call (they are updated in place by the compiled backend).
    """
    paths = np.ascontiguousarray(paths, dtype=np.uint64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    shift_t = np.ascontiguousarray(shift_t, dtype=np.float64)
    shift_x = np.ascontiguousarray(shift_x, dtype=np.float64)
    use_compiled = (
        HAVE_SPEEDUPS
        and payload.compiled_ok
        and payload.kind in _KIND_IDS
        and payload.dim <= 4
    )
    if not use_compiled:
        # field evaluators raise ExtentError themselves on finite media
        return numpy_backend.em_paths(payload, seed, paths,
                                      x0 if state is None else state,
                                      shift_t, shift_x, step0, dt, n_steps,
                                      rec_stride, control=control, delta=delta,
                                      s0=s_state)

    if state is None:
        state = x0.copy()
    if s_state is None:
        s_state = np.full(state.shape[0], step0 * dt)
    augmented = delta is not None
    n_rec = n_steps // rec_stride
    out = np.empty((state.shape[0], n_rec, payload.dim + 1 if augmented else payload.dim))
    failed = _speedups.em_paths_kernel(
        _KIND_IDS[payload.kind], payload.dim, payload.scalars,
        payload.colors_t, payload.lo_t, payload.colors_1, payload.lo_1,
        payload.cheb,
        np.uint64(seed), paths, state, s_state,
        shift_t, shift_x,
        np.uint64(step0), dt, n_steps, rec_stride,
        bool(control), augmented, 0.0 if delta is None else float(delta),
        out,
    )
    if failed >= 0:
        raise ExtentError(
            f"medium evaluation left the sampled extent at step {failed}; "
            "enlarge the chessboard extent"
        )
    return out
