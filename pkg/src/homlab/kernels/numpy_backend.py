"""Pure-numpy kernel backend: counter-based random streams and Euler-Maruyama loops.

The random stream is Philox4x32-10 (Salmon et al., "Parallel random numbers:
as easy as 1, 2, 3"). Every Gaussian increment is addressed by
``(seed, path, step, purpose, slot)``, so ensembles are reproducible for any
execution order, chunking, or worker count. The compiled backend in
``_speedups`` implements the identical stream; the two are interchangeable.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_SH11 = np.uint64(11)
_INV53 = 2.0 ** -53

# Stream purposes. Values are baked into saved artifacts; do not renumber.
PURPOSE_NOISE = 0       # spatial Brownian increments
PURPOSE_TIMENOISE = 1   # independent B' of the time-augmented diffusion
PURPOSE_INIT = 2        # stationary initial shifts
PURPOSE_COLOR_T = 3     # chessboard colors, time axis
PURPOSE_COLOR_X1 = 4    # chessboard colors, first space axis
PURPOSE_COLOR_X2 = 5    # chessboard colors, second space axis
PURPOSE_USHIFT = 6      # chessboard origin shift
PURPOSE_MISC = 7


def philox4x32(c0, c1, c2, c3, k0, k1):
    """One Philox4x32-10 block; all arguments broadcast as uint64 arrays.

    Only the low 32 bits of each input word are used. Returns four uint64
    arrays holding 32-bit words.
    """
    c0 = np.asarray(c0, dtype=np.uint64) & _MASK
    c1 = np.asarray(c1, dtype=np.uint64) & _MASK
    c2 = np.asarray(c2, dtype=np.uint64) & _MASK
    c3 = np.asarray(c3, dtype=np.uint64) & _MASK
    k0 = np.asarray(k0, dtype=np.uint64) & _MASK
    k1 = np.asarray(k1, dtype=np.uint64) & _MASK
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = (p1 >> _SH32) ^ c1 ^ k0
        n1 = p1 & _MASK
        n2 = (p0 >> _SH32) ^ c3 ^ k1
        n3 = p0 & _MASK
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def _block_words(seed, paths, step, purpose, block):
    seed = np.uint64(seed)
    step = np.uint64(step)
    c3 = np.uint64((purpose << 24) | block)
    return philox4x32(
        step & _MASK,
        step >> _SH32,
        paths,
        c3,
        seed & _MASK,
        seed >> _SH32,
    )


def _uniform_pair(words):
    """Two open-interval (0,1) doubles from one 4x32 block."""
    w0, w1, w2, w3 = words
    x1 = (w0 << _SH32) | w1
    x2 = (w2 << _SH32) | w3
    u1 = ((x1 >> _SH11).astype(np.float64) + 0.5) * _INV53
    u2 = ((x2 >> _SH11).astype(np.float64) + 0.5) * _INV53
    return u1, u2


def uniforms(seed, paths, step, purpose, n):
    """(P, n) array of uniforms in (0,1) for each path id in ``paths``."""
    paths = np.asarray(paths, dtype=np.uint64)
    out = np.empty((paths.shape[0], n), dtype=np.float64)
    for j in range((n + 1) // 2):
        u1, u2 = _uniform_pair(_block_words(seed, paths, step, purpose, j))
        out[:, 2 * j] = u1
        if 2 * j + 1 < n:
            out[:, 2 * j + 1] = u2
    return out


def normals(seed, paths, step, purpose, n):
    """(P, n) array of standard Gaussians, Box-Muller over the Philox stream."""
    paths = np.asarray(paths, dtype=np.uint64)
    out = np.empty((paths.shape[0], n), dtype=np.float64)
    for j in range((n + 1) // 2):
        u1, u2 = _uniform_pair(_block_words(seed, paths, step, purpose, j))
        r = np.sqrt(-2.0 * np.log(u1))
        out[:, 2 * j] = r * np.cos(2.0 * np.pi * u2)
        if 2 * j + 1 < n:
            out[:, 2 * j + 1] = r * np.sin(2.0 * np.pi * u2)
    return out


def em_paths(payload, seed, paths, x0, shift_t, shift_x, step0, dt, n_steps,
             rec_stride, control=False, delta=None, s0=None):
    """Euler-Maruyama over ``n_steps`` steps for a batch of paths.

    payload : KernelPayload with vectorized ``drift``/``sigma`` callables
        (``drift_control``/``sigma_control`` when ``control``).
    x0 : (P, d) start states. shift_t, shift_x : per-path stationary origin
        shift fed to the coefficient evaluation only.
    step0 : global index of the first step taken here, which keys the random
        stream; chunked continuation passes the running step count.
    delta : None for the plain diffusion; a float >= 0 switches to the
        (d+1)-dimensional time-augmented diffusion whose first coordinate
        carries its own clock.

    Returns (P, n_steps // rec_stride, d or d+1) states recorded at steps
    rec_stride, 2*rec_stride, ...; the start state is not recorded.
    """
    if n_steps % rec_stride:
        raise ValueError("n_steps must be a multiple of rec_stride")
    drift = payload.drift_control if control else payload.drift
    sigma = payload.sigma_control if control else payload.sigma
    paths = np.asarray(paths, dtype=np.uint64)
    x = np.array(x0, dtype=np.float64, copy=True)
    n_paths, dim = x.shape
    shift_x = np.asarray(shift_x, dtype=np.float64)
    shift_t = np.asarray(shift_t, dtype=np.float64)
    n_rec = n_steps // rec_stride
    augmented = delta is not None
    out = np.empty((n_paths, n_rec, dim + 1 if augmented else dim))
    sqdt = np.sqrt(dt)
    if augmented:
        # own clock of the augmented process; defaults to the global time
        s = np.full(n_paths, step0 * dt) if s0 is None else np.array(s0, dtype=np.float64)
        sq_noise = np.sqrt(delta * dt)
    rec = 0
    for n in range(n_steps):
        step = step0 + n
        if augmented:
            t_eval = s + shift_t
        else:
            t_eval = step * dt + shift_t
        xs = x + shift_x
        b = drift(t_eval, xs)
        sig = sigma(t_eval, xs)
        z = normals(seed, paths, step, PURPOSE_NOISE, dim)
        x = x + b * dt + sqdt * np.einsum("pij,pj->pi", sig, z)
        if augmented:
            if delta == 0.0:
                # exact product keeps the clock bitwise equal to the plain stepper
                s = np.full(n_paths, (step + 1) * dt)
            else:
                zt = normals(seed, paths, step, PURPOSE_TIMENOISE, 1)[:, 0]
                s = s + dt + sq_noise * zt
        if (n + 1) % rec_stride == 0:
            if augmented:
                out[:, rec, 0] = s
                out[:, rec, 1:] = x
            else:
                out[:, rec, :] = x
            rec += 1
    return out
