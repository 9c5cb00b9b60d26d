# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Euler-Maruyama kernels and the Philox4x32-10 counter stream.

Mirrors :mod:`homlab.kernels.numpy_backend` exactly: same stream layout
(seed, path, step, purpose, slot), same Box-Muller transform, same stepping
order. The integer stream is bitwise identical across backends; float outputs
may differ in the last ulp because libm and numpy vector math round
independently.

Medium kinds are dispatched by integer id:
    0 constant, 1 trig1d, 2 trig1dt, 3 periodic31, 4 chessboard
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, floor, log, sin, sqrt

cdef extern from "math.h" nogil:
    void sincos(double x, double* sin_out, double* cos_out)

cnp.import_array()

ctypedef unsigned long long u64
ctypedef unsigned int u32

cdef double TWO_PI = 6.283185307179586476925286766559
cdef double INV53 = 1.0 / 9007199254740992.0

cdef enum:
    PURPOSE_NOISE = 0
    PURPOSE_TIMENOISE = 1

cdef enum:
    KIND_CONSTANT = 0
    KIND_TRIG1D = 1
    KIND_TRIG1DT = 2
    KIND_PERIODIC31 = 3
    KIND_CHESSBOARD = 4
    KIND_TRIG1DW = 5

BACKEND_NAME = "cython"


cdef inline void philox_block(u64 seed, u64 path, u64 step, u32 c3, u32* out) noexcept nogil:
    cdef u32 cc0 = <u32>(step & 0xFFFFFFFFUL)
    cdef u32 cc1 = <u32>(step >> 32)
    cdef u32 cc2 = <u32>(path & 0xFFFFFFFFUL)
    cdef u32 cc3 = c3
    cdef u32 k0 = <u32>(seed & 0xFFFFFFFFUL)
    cdef u32 k1 = <u32>(seed >> 32)
    cdef u64 p0, p1
    cdef u32 n0, n1, n2, n3
    cdef int i
    for i in range(10):
        p0 = (<u64>0xD2511F53UL) * cc0
        p1 = (<u64>0xCD9E8D57UL) * cc2
        n0 = (<u32>(p1 >> 32)) ^ cc1 ^ k0
        n1 = <u32>(p1 & 0xFFFFFFFFUL)
        n2 = (<u32>(p0 >> 32)) ^ cc3 ^ k1
        n3 = <u32>(p0 & 0xFFFFFFFFUL)
        cc0 = n0
        cc1 = n1
        cc2 = n2
        cc3 = n3
        k0 = k0 + <u32>0x9E3779B9UL
        k1 = k1 + <u32>0xBB67AE85UL
    out[0] = cc0
    out[1] = cc1
    out[2] = cc2
    out[3] = cc3


cdef inline void draw_pair(u64 seed, u64 path, u64 step, int purpose, int block,
                           bint gaussian, double* z0, double* z1) noexcept nogil:
    cdef u32 w[4]
    cdef u64 x1, x2
    cdef double u1, u2, r
    philox_block(seed, path, step, <u32>((purpose << 24) | block), w)
    x1 = ((<u64>w[0]) << 32) | w[1]
    x2 = ((<u64>w[2]) << 32) | w[3]
    u1 = ((x1 >> 11) + 0.5) * INV53
    u2 = ((x2 >> 11) + 0.5) * INV53
    if gaussian:
        r = sqrt(-2.0 * log(u1))
        sincos(TWO_PI * u2, &u1, &u2)   # reuse as sin/cos slots
        z0[0] = r * u2
        z1[0] = r * u1
    else:
        z0[0] = u1
        z1[0] = u2


cdef inline void draw_normals(u64 seed, u64 path, u64 step, int purpose, int n,
                              double* z) noexcept nogil:
    cdef int j
    cdef double a, b
    for j in range((n + 1) // 2):
        draw_pair(seed, path, step, purpose, j, True, &a, &b)
        z[2 * j] = a
        if 2 * j + 1 < n:
            z[2 * j + 1] = b


cdef inline double cheb_eval(const double* coef, int n, double zeta) noexcept nogil:
    # Clenshaw recurrence for a Chebyshev series on [-1, 1]
    cdef double b0 = 0.0, b1 = 0.0, b2 = 0.0
    cdef int k
    for k in range(n - 1, 0, -1):
        b2 = b1
        b1 = b0
        b0 = 2.0 * zeta * b0 - b2 + coef[k]
    return zeta * b0 - b1 + coef[0]


cdef inline double bump_phi(double z, double r, double norm) noexcept nogil:
    cdef double q = z / r
    if q <= -1.0 or q >= 1.0:
        return 0.0
    return norm * exp(-1.0 / (1.0 - q * q))


cdef inline int stripe_eval(double g, double shift, double r,
                            const signed char* colors, long n_colors, long k_lo,
                            bint periodic,
                            const double* cheb, int n_cheb, double phi_norm,
                            double* value, double* deriv) noexcept nogil:
    # Mollified shifted stripe process: colors on unit cells, blended across
    # the cell boundary by the bump antiderivative. Returns nonzero when the
    # evaluation leaves a non-periodic sampled extent.
    cdef double y = g + shift
    cdef double j = floor(y)
    cdef double frac = y - j
    cdef long jj = (<long>j) - k_lo
    cdef long jm, jp
    cdef double lo, hi, ph
    if periodic:
        jj = jj % n_colors
        if jj < 0:
            jj += n_colors
        jm = (jj - 1) % n_colors
        if jm < 0:
            jm += n_colors
        jp = (jj + 1) % n_colors
    else:
        if jj < 1 or jj > n_colors - 2:
            return 1
        jm = jj - 1
        jp = jj + 1
    if frac < r:
        lo = colors[jm]
        hi = colors[jj]
        ph = cheb_eval(cheb, n_cheb, frac / r)
        value[0] = lo + (hi - lo) * ph
        deriv[0] = (hi - lo) * bump_phi(frac, r, phi_norm)
    elif frac > 1.0 - r:
        lo = colors[jj]
        hi = colors[jp]
        ph = cheb_eval(cheb, n_cheb, (frac - 1.0) / r)
        value[0] = lo + (hi - lo) * ph
        deriv[0] = (hi - lo) * bump_phi(frac - 1.0, r, phi_norm)
    else:
        value[0] = colors[jj]
        deriv[0] = 0.0
    return 0


cdef inline int eval_coeffs(int kind, int dim, const double* sc,
                            const signed char* col_t, long n_t, long lo_t,
                            const signed char* col_1, long n_1, long lo_1,
                            const double* cheb, int n_cheb,
                            bint control, double t, double* x,
                            double* b, double* sig) noexcept nogil:
    # Writes drift into b[dim] and the noise matrix into sig[dim*dim]
    # (row-major). Returns nonzero on out-of-extent evaluation.
    cdef double a_val, da, dv, s, sx, sy, th, c, sn
    cdef double alpha, dalpha, beta, dbeta
    cdef double s0, c0, s1, c1
    cdef int i, j
    if kind == KIND_CONSTANT:
        for i in range(dim):
            b[i] = sc[dim * dim + i]
            for j in range(dim):
                sig[i * dim + j] = sc[i * dim + j]
    elif kind == KIND_TRIG1D:
        sincos(x[0], &s0, &c0)
        a_val = sc[0] + sc[1] * s0 + sc[2] * c0
        da = sc[1] * c0 - sc[2] * s0
        dv = -sc[3] * s0 + sc[4] * c0
        b[0] = 0.5 * da - a_val * dv
        sig[0] = sqrt(a_val)
    elif kind == KIND_TRIG1DT:
        sincos(x[0], &s0, &c0)
        a_val = sc[0] + sc[1] * s0
        da = sc[1] * c0
        if control:
            b[0] = 0.5 * da
            sig[0] = sqrt(a_val)
        else:
            s = 1.0 + sc[2] * cos(t)
            b[0] = 0.5 * da * s
            sig[0] = sqrt(a_val * s)
    elif kind == KIND_TRIG1DW:
        if control:
            b[0] = 0.0
            sig[0] = 1.0
        else:
            sincos(x[0] - sc[2] * t, &s0, &c0)
            b[0] = 0.5 * sc[1] * c0
            sig[0] = sqrt(sc[0] + sc[1] * s0)
    elif kind == KIND_PERIODIC31:
        sincos(x[0], &s0, &c0)
        sincos(x[1], &s1, &c1)
        s = (1.0 - c0) * (1.0 - c1)
        sx = s0 * (1.0 - c1)
        sy = (1.0 - c0) * s1
        b[0] = s * sx
        b[1] = s * sy
        if control or sc[0] == 0.0:
            sig[0] = s
            sig[1] = 0.0
            sig[2] = 0.0
            sig[3] = s
        else:
            sincos(sc[1] * t, &sn, &c)
            sig[0] = s * c
            sig[1] = -s * sn
            sig[2] = s * sn
            sig[3] = s * c
    else:  # KIND_CHESSBOARD; scalars = [r, shift_x1, shift_t, phi_norm, periodic]
        if stripe_eval(x[0], sc[1], sc[0], col_1, n_1, lo_1, sc[4] != 0.0,
                       cheb, n_cheb, sc[3], &alpha, &dalpha):
            return 1
        sig[0] = 1.0
        sig[1] = 0.0
        sig[2] = 0.0
        sig[3] = alpha
        b[0] = 0.0
        if control:
            b[1] = 0.0
        else:
            if stripe_eval(t, sc[2], sc[0], col_t, n_t, lo_t, sc[4] != 0.0,
                           cheb, n_cheb, sc[3], &beta, &dbeta):
                return 1
            b[1] = -alpha * dalpha * beta
    return 0


def em_paths_kernel(int kind, int dim,
                    double[::1] scalars,
                    signed char[::1] colors_t, long lo_t,
                    signed char[::1] colors_1, long lo_1,
                    double[::1] cheb,
                    u64 seed, u64[::1] paths,
                    double[:, ::1] state, double[::1] s_state,
                    double[::1] shift_t, double[:, ::1] shift_x,
                    u64 step0, double dt, long n_steps, long rec_stride,
                    bint control, bint augmented, double delta,
                    double[:, :, ::1] out):
    """Advance all paths ``n_steps`` steps, recording every ``rec_stride``-th.

    ``state`` (and ``s_state`` when augmented) are updated in place so chunked
    calls continue exactly. Returns -1 on success, else the failing global
    step index (chessboard extent violation).
    """
    cdef long n_paths = state.shape[0]
    cdef long p, n, rec
    cdef u64 step
    cdef double t_eval, s_own, acc
    cdef double xw[4]
    cdef double pos[4]
    cdef double bb[4]
    cdef double sg[16]
    cdef double z[4]
    cdef double zt0, zt1
    cdef double sq_dt = sqrt(dt)
    cdef double sq_noise = sqrt(delta * dt) if augmented else 0.0
    cdef int i, j, fail
    cdef long failed_step = -1
    cdef const signed char* pcol_t = &colors_t[0] if colors_t.shape[0] else NULL
    cdef const signed char* pcol_1 = &colors_1[0] if colors_1.shape[0] else NULL
    cdef const double* pcheb = &cheb[0] if cheb.shape[0] else NULL
    cdef long n_col_t = colors_t.shape[0]
    cdef long n_col_1 = colors_1.shape[0]
    cdef int n_cheb = <int>cheb.shape[0]

    if dim > 4:
        raise ValueError("compiled kernel supports dim <= 4")
    if n_steps % rec_stride != 0:
        raise ValueError("n_steps must be a multiple of rec_stride")

    with nogil:
        for p in range(n_paths):
            if failed_step >= 0:
                break
            for i in range(dim):
                xw[i] = state[p, i]
            s_own = s_state[p] if augmented else 0.0
            rec = 0
            for n in range(n_steps):
                step = step0 + <u64>n
                if augmented:
                    t_eval = s_own + shift_t[p]
                else:
                    t_eval = step * dt + shift_t[p]
                for i in range(dim):
                    pos[i] = xw[i] + shift_x[p, i]
                fail = eval_coeffs(kind, dim, &scalars[0],
                                   pcol_t, n_col_t, lo_t,
                                   pcol_1, n_col_1, lo_1,
                                   pcheb, n_cheb,
                                   control, t_eval, pos, bb, sg)
                if fail:
                    failed_step = <long>step
                    break
                draw_normals(seed, paths[p], step, PURPOSE_NOISE, dim, z)
                for i in range(dim):
                    acc = 0.0
                    for j in range(dim):
                        acc += sg[i * dim + j] * z[j]
                    xw[i] = xw[i] + bb[i] * dt + sq_dt * acc
                if augmented:
                    if delta == 0.0:
                        s_own = (step + 1) * dt
                    else:
                        draw_pair(seed, paths[p], step, PURPOSE_TIMENOISE, 0,
                                  True, &zt0, &zt1)
                        s_own = s_own + dt + sq_noise * zt0
                if (n + 1) % rec_stride == 0:
                    if augmented:
                        out[p, rec, 0] = s_own
                        for i in range(dim):
                            out[p, rec, i + 1] = xw[i]
                    else:
                        for i in range(dim):
                            out[p, rec, i] = xw[i]
                    rec += 1
            for i in range(dim):
                state[p, i] = xw[i]
            if augmented:
                s_state[p] = s_own
    return failed_step


def philox4x32(object c0, object c1, object c2, object c3, object k0, object k1):
    """Vector Philox4x32-10 block, for stream-equality tests and benchmarks."""
    arrs = np.broadcast_arrays(*(np.asarray(v, dtype=np.uint64) for v in (c0, c1, c2, c3, k0, k1)))
    shape = arrs[0].shape
    flat = [np.ascontiguousarray(a.ravel()) for a in arrs]
    cdef u64[::1] v0 = flat[0]
    cdef u64[::1] v1 = flat[1]
    cdef u64[::1] v2 = flat[2]
    cdef u64[::1] v3 = flat[3]
    cdef u64[::1] vk0 = flat[4]
    cdef u64[::1] vk1 = flat[5]
    cdef long n = v0.shape[0]
    out = [np.empty(n, dtype=np.uint64) for _ in range(4)]
    cdef u64[::1] o0 = out[0]
    cdef u64[::1] o1 = out[1]
    cdef u64[::1] o2 = out[2]
    cdef u64[::1] o3 = out[3]
    cdef long idx
    cdef u32 w[4]
    cdef u32 cc0, cc1, cc2, cc3, kk0, kk1, t0, t1, t2, t3
    cdef u64 p0, p1
    cdef int rnd
    with nogil:
        for idx in range(n):
            cc0 = <u32>(v0[idx] & 0xFFFFFFFFUL)
            cc1 = <u32>(v1[idx] & 0xFFFFFFFFUL)
            cc2 = <u32>(v2[idx] & 0xFFFFFFFFUL)
            cc3 = <u32>(v3[idx] & 0xFFFFFFFFUL)
            kk0 = <u32>(vk0[idx] & 0xFFFFFFFFUL)
            kk1 = <u32>(vk1[idx] & 0xFFFFFFFFUL)
            for rnd in range(10):
                p0 = (<u64>0xD2511F53UL) * cc0
                p1 = (<u64>0xCD9E8D57UL) * cc2
                t0 = (<u32>(p1 >> 32)) ^ cc1 ^ kk0
                t1 = <u32>(p1 & 0xFFFFFFFFUL)
                t2 = (<u32>(p0 >> 32)) ^ cc3 ^ kk1
                t3 = <u32>(p0 & 0xFFFFFFFFUL)
                cc0 = t0
                cc1 = t1
                cc2 = t2
                cc3 = t3
                kk0 = kk0 + <u32>0x9E3779B9UL
                kk1 = kk1 + <u32>0xBB67AE85UL
            o0[idx] = cc0
            o1[idx] = cc1
            o2[idx] = cc2
            o3[idx] = cc3
    return tuple(o.reshape(shape) for o in out)


def normals(u64 seed, object paths, u64 step, int purpose, int n):
    """(P, n) standard Gaussians; same contract as the numpy backend."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] p_arr = np.ascontiguousarray(
        np.asarray(paths, dtype=np.uint64))
    cdef long n_paths = p_arr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_paths, n))
    cdef double[:, ::1] o = out
    cdef u64[::1] pv = p_arr
    cdef long p
    cdef int i
    cdef double buf[64]
    if n > 64:
        raise ValueError("n too large")
    with nogil:
        for p in range(n_paths):
            draw_normals(seed, pv[p], step, purpose, n, buf)
            for i in range(n):
                o[p, i] = buf[i]
    return out


def uniforms(u64 seed, object paths, u64 step, int purpose, int n):
    """(P, n) open-interval uniforms; same contract as the numpy backend."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] p_arr = np.ascontiguousarray(
        np.asarray(paths, dtype=np.uint64))
    cdef long n_paths = p_arr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_paths, n))
    cdef double[:, ::1] o = out
    cdef u64[::1] pv = p_arr
    cdef long p
    cdef int j
    cdef double a, b
    with nogil:
        for p in range(n_paths):
            for j in range((n + 1) // 2):
                draw_pair(seed, pv[p], step, purpose, j, False, &a, &b)
                o[p, 2 * j] = a
                if 2 * j + 1 < n:
                    o[p, 2 * j + 1] = b
    return out
