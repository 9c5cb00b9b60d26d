"""Coefficient fields of diffusions in periodic and random media.

A medium bundles the diffusion factor ``sigma``, its time-independent control
factor ``sigma_tilde``, the bounded potential ``V``, the antisymmetric stream
matrix ``H``, and their first derivatives. The drift is never specified
directly by a model (except in diagnostic media); it is derived,

    b_i = sum_j ( 1/2 D_j a_ij - a_ij D_j V + 1/2 D_j H_ij ),   a = sigma sigma^T,

which makes exp(-2V) (normalized) the invariant weight of the environment
process. The control drift uses a_tilde in place of a and drops the H term.

Shipped constructions:

* ``make_periodic_medium`` - torus medium with scalar factor
  (1-cos x)(1-cos y) degenerating on the cell edges, times a uniformly
  elliptic matrix field U.
* ``make_chessboard_medium`` - stationary random stripes: Bernoulli colors on
  unit cells, shifted by a uniform origin and smoothed by a compact bump.
* ``make_constant_medium``, ``make_trig1d_medium``, ``make_trig1dt_medium`` -
  diagnostic and benchmark media with closed-form coefficients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional

import numpy as np

from . import kernels
from .kernels import ExtentError, KernelPayload
from .mollifier import MollifierSpec

__all__ = [
    "CoefficientField", "ControlConstants", "MediumInstance", "MollifierSpec",
    "ControlReport", "ExtentError",
    "make_constant_medium", "make_trig1d_medium", "make_trig1dt_medium",
    "make_trig1dw_medium", "make_periodic_medium", "make_chessboard_medium",
    "drift", "drift_control", "validate_control", "fit_control_constants",
    "cell_average", "save_medium", "load_medium", "OBSERVABLES",
]


@dataclass(frozen=True)
class ControlConstants:
    """Constants tying the diffusion matrix to its time-independent control."""

    m: float
    M: float
    c1_h: float = 0.0
    c2_h: float = 0.0
    c2_a: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.m <= self.M and np.isfinite(self.M)):
            raise ValueError(f"need 0 < m <= M < inf, got m={self.m}, M={self.M}")
        for name in ("c1_h", "c2_h", "c2_a"):
            v = getattr(self, name)
            if not (v >= 0.0 and np.isfinite(v)):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def _pts(t, x, dim):
    """Broadcast (t, x) to (n,) and (n, dim) float arrays."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != dim:
        raise ValueError(f"points have dimension {x.shape[1]}, field has {dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return t, x


@dataclass
class CoefficientField:
    """Vectorized evaluators of one medium realization.

    All evaluators take ``t`` (scalar or (n,)) and ``x`` ((n, d) or (d,)) and
    return per-point arrays. ``V`` and everything derived from
    ``sigma_tilde`` are time-independent by construction and take no ``t``.
    """

    dim: int
    periods: Optional[tuple]       # (T, L_1..L_d) cell periods, None if finite extent
    bound: float                   # uniform bound K on the coefficients
    sigma: Callable                # (t, x) -> (n, d, d)
    sigma_tilde: Callable          # (x) -> (n, d, d)
    V: Callable                    # (x) -> (n,)
    H: Callable                    # (t, x) -> (n, d, d)
    grad_V: Callable               # (x) -> (n, d)
    space_grad_a: Callable         # (t, x) -> (n, d, d, d), [..., j] = D_j a
    space_grad_a_tilde: Callable   # (x) -> (n, d, d, d)
    space_grad_H: Callable         # (t, x) -> (n, d, d, d)
    time_deriv_a: Callable         # (t, x) -> (n, d, d)
    time_deriv_H: Callable         # (t, x) -> (n, d, d)
    drift_override: Optional[Callable] = None   # diagnostic media only

    def a(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def a_tilde(self, x):
        s = self.sigma_tilde(x)
        return s @ np.swapaxes(s, -1, -2)

    def weight(self, x):
        """Unnormalized invariant weight exp(-2 V)."""
        return np.exp(-2.0 * self.V(x))


def _shifted_field(base: CoefficientField, t0: float, x0: np.ndarray) -> CoefficientField:
    x0 = np.asarray(x0, dtype=np.float64)

    def sh(f, timed):
        if timed:
            return lambda t, x: f(np.asarray(t, dtype=np.float64) + t0,
                                  np.atleast_2d(np.asarray(x, dtype=np.float64)) + x0)
        return lambda x: f(np.atleast_2d(np.asarray(x, dtype=np.float64)) + x0)

    return replace(
        base,
        sigma=sh(base.sigma, True),
        sigma_tilde=sh(base.sigma_tilde, False),
        V=sh(base.V, False),
        H=sh(base.H, True),
        grad_V=sh(base.grad_V, False),
        space_grad_a=sh(base.space_grad_a, True),
        space_grad_a_tilde=sh(base.space_grad_a_tilde, False),
        space_grad_H=sh(base.space_grad_H, True),
        time_deriv_a=sh(base.time_deriv_a, True),
        time_deriv_H=sh(base.time_deriv_H, True),
        drift_override=(None if base.drift_override is None
                        else sh(base.drift_override, True)),
    )


@dataclass
class MediumInstance:
    """One realization of a medium with a shift origin.

    Shifting the origin by (s, y) and evaluating at (t, x) equals evaluating
    the unshifted instance at (t+s, x+y); re-evaluation is deterministic.
    """

    kind: str
    base_field: CoefficientField
    control: ControlConstants
    params: dict
    payload: KernelPayload
    randomness: Optional[dict] = None
    origin_t: float = 0.0
    origin_x: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    seed: Optional[int] = None

    def __post_init__(self):
        if self.origin_x.shape == (0,):
            self.origin_x = np.zeros(self.base_field.dim)

    @property
    def dim(self) -> int:
        return self.base_field.dim

    @property
    def field(self) -> CoefficientField:
        if self.origin_t == 0.0 and not self.origin_x.any():
            return self.base_field
        return _shifted_field(self.base_field, self.origin_t, self.origin_x)

    def shifted(self, s: float, y) -> "MediumInstance":
        return replace(self, origin_t=self.origin_t + s,
                       origin_x=self.origin_x + np.asarray(y, dtype=np.float64))

    @property
    def medium_id(self) -> str:
        desc = json.dumps(
            {"kind": self.kind, "params": _jsonable(self.params), "seed": self.seed,
             "origin": [self.origin_t, list(self.origin_x)]},
            sort_keys=True, default=str)
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

def drift(field: CoefficientField, t, x):
    """Drift of the diffusion, derived from (a, V, H)."""
    if field.drift_override is not None:
        t_, x_ = _pts(t, x, field.dim)
        return field.drift_override(t_, x_)
    t_, x_ = _pts(t, x, field.dim)
    da = field.space_grad_a(t_, x_)
    dh = field.space_grad_H(t_, x_)
    a = field.a(t_, x_)
    gv = field.grad_V(x_)
    # b_i = sum_j 1/2 D_j a_ij - a_ij D_j V + 1/2 D_j H_ij
    b = 0.5 * np.einsum("nijj->ni", da) - np.einsum("nij,nj->ni", a, gv) \
        + 0.5 * np.einsum("nijj->ni", dh)
    return b


def drift_control(field: CoefficientField, x):
    """Drift of the control diffusion (time-independent, no stream term)."""
    x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
    da = field.space_grad_a_tilde(x_)
    at = field.a_tilde(x_)
    gv = field.grad_V(x_)
    return 0.5 * np.einsum("nijj->ni", da) - np.einsum("nij,nj->ni", at, gv)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def _zeros_like_mat(dim):
    def f(t, x):
        t_, x_ = _pts(t, x, dim)
        return np.zeros((x_.shape[0], dim, dim))
    return f


def make_constant_medium(sigma, b=None, H=None) -> MediumInstance:
    """Diagnostic medium with constant coefficients.

    ``b`` overrides the derived drift (which is zero for constant fields);
    useful for pure-drift and pure-noise sanity checks.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    dim = sigma.shape[0]
    Hmat = np.zeros((dim, dim)) if H is None else np.asarray(H, dtype=np.float64)
    if not np.allclose(Hmat + Hmat.T, 0.0, atol=1e-12):
        raise ValueError("H must be antisymmetric")
    b_vec = None if b is None else np.asarray(b, dtype=np.float64)

    def const_mat(mat):
        def f(*args):
            x = np.atleast_2d(np.asarray(args[-1], dtype=np.float64))
            return np.broadcast_to(mat, (x.shape[0], dim, dim)).copy()
        return f

    def zero_tensor3(*args):
        x = np.atleast_2d(np.asarray(args[-1], dtype=np.float64))
        return np.zeros((x.shape[0], dim, dim, dim))

    fld = CoefficientField(
        dim=dim, periods=(2 * np.pi,) * (dim + 1),
        bound=max(1.0, float(np.abs(sigma).max()),
                  0.0 if b_vec is None else float(np.abs(b_vec).max())),
        sigma=const_mat(sigma),
        sigma_tilde=const_mat(sigma),
        V=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        H=const_mat(Hmat),
        grad_V=lambda x: np.zeros(np.atleast_2d(x).shape),
        space_grad_a=zero_tensor3,
        space_grad_a_tilde=zero_tensor3,
        space_grad_H=zero_tensor3,
        time_deriv_a=_zeros_like_mat(dim),
        time_deriv_H=_zeros_like_mat(dim),
        drift_override=None if b_vec is None else (
            lambda t, x: np.broadcast_to(b_vec, (np.atleast_2d(x).shape[0], dim)).copy()),
    )
    scalars = np.concatenate([sigma.ravel(),
                              np.zeros(dim) if b_vec is None else b_vec])
    payload = KernelPayload(
        kind="constant", dim=dim, scalars=scalars,
        drift=lambda t, x: drift(fld, t, x),
        sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
        compiled_ok=dim <= 4,
    )
    consts = ControlConstants(m=1.0, M=1.0,
                              c1_h=_antisym_control_bound(Hmat, sigma @ sigma.T))
    return MediumInstance(kind="constant", base_field=fld, control=consts,
                          params={"sigma": sigma, "b": b_vec, "H": Hmat},
                          payload=payload)


def _antisym_control_bound(Hmat, a_tilde):
    if not Hmat.any():
        return 0.0
    absH = _matrix_abs(Hmat[None])[0]
    vals = np.linalg.eigvalsh(absH)
    base = np.linalg.eigvalsh(a_tilde)
    if base.min() <= 0:
        raise ValueError("constant H requires nondegenerate sigma")
    return float(vals.max() / base.min())


def make_trig1d_medium(c0=1.0, c1=0.5, c2=0.0, v1=0.0, v2=0.0) -> MediumInstance:
    """One-dimensional cell benchmark: a(x) = c0 + c1 sin x + c2 cos x,
    V(x) = v1 cos x + v2 sin x, H = 0. Control factor equals sigma."""
    if c0 - np.hypot(c1, c2) < -1e-12:
        raise ValueError("a(x) must be nonnegative")

    def a_val(x):
        return c0 + c1 * np.sin(x[:, 0]) + c2 * np.cos(x[:, 0])

    def da_val(x):
        return c1 * np.cos(x[:, 0]) - c2 * np.sin(x[:, 0])

    def sigma(t, x):
        t_, x_ = _pts(t, x, 1)
        return np.sqrt(np.maximum(a_val(x_), 0.0))[:, None, None]

    def sigma_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.sqrt(np.maximum(a_val(x_), 0.0))[:, None, None]

    def space_grad_a(t, x):
        t_, x_ = _pts(t, x, 1)
        return da_val(x_)[:, None, None, None]

    def space_grad_a_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return da_val(x_)[:, None, None, None]

    fld = CoefficientField(
        dim=1, periods=(2 * np.pi, 2 * np.pi),
        bound=max(1.0, c0 + np.hypot(c1, c2), np.hypot(v1, v2)),
        sigma=sigma, sigma_tilde=sigma_tilde,
        V=lambda x: v1 * np.cos(np.atleast_2d(x)[:, 0]) + v2 * np.sin(np.atleast_2d(x)[:, 0]),
        H=_zeros_like_mat(1),
        grad_V=lambda x: (-v1 * np.sin(np.atleast_2d(x)[:, 0])
                          + v2 * np.cos(np.atleast_2d(x)[:, 0]))[:, None],
        space_grad_a=space_grad_a,
        space_grad_a_tilde=space_grad_a_tilde,
        space_grad_H=lambda t, x: np.zeros((_pts(t, x, 1)[1].shape[0], 1, 1, 1)),
        time_deriv_a=_zeros_like_mat(1),
        time_deriv_H=_zeros_like_mat(1),
    )
    payload = KernelPayload(
        kind="trig1d", dim=1, scalars=np.array([c0, c1, c2, v1, v2]),
        drift=lambda t, x: drift(fld, t, x), sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
    )
    return MediumInstance(kind="trig1d", base_field=fld,
                          control=ControlConstants(m=1.0, M=1.0),
                          params={"c0": c0, "c1": c1, "c2": c2, "v1": v1, "v2": v2},
                          payload=payload)


def make_trig1dt_medium(c0=1.0, c1=0.5, ct=0.5) -> MediumInstance:
    """Genuinely time-dependent 1D medium: a(t,x) = (c0 + c1 sin x)(1 + ct cos t).

    The control factor is the time average sqrt(c0 + c1 sin x); the control
    constants are m = 1-ct, M = 1+ct, C2a = ct.
    """
    if not 0.0 <= ct < 1.0:
        raise ValueError("need 0 <= ct < 1")
    if c0 - abs(c1) < -1e-12:
        raise ValueError("base profile must be nonnegative")

    def base(x):
        return c0 + c1 * np.sin(x[:, 0])

    def gain(t):
        return 1.0 + ct * np.cos(t)

    def sigma(t, x):
        t_, x_ = _pts(t, x, 1)
        return np.sqrt(np.maximum(base(x_) * gain(t_), 0.0))[:, None, None]

    fld = CoefficientField(
        dim=1, periods=(2 * np.pi, 2 * np.pi),
        bound=max(1.0, (c0 + abs(c1)) * (1 + ct)),
        sigma=sigma,
        sigma_tilde=lambda x: np.sqrt(np.maximum(base(np.atleast_2d(x)), 0.0))[:, None, None],
        V=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        H=_zeros_like_mat(1),
        grad_V=lambda x: np.zeros(np.atleast_2d(x).shape),
        space_grad_a=lambda t, x: (c1 * np.cos(_pts(t, x, 1)[1][:, 0])
                                   * gain(_pts(t, x, 1)[0]))[:, None, None, None],
        space_grad_a_tilde=lambda x: (c1 * np.cos(np.atleast_2d(x)[:, 0]))[:, None, None, None],
        space_grad_H=lambda t, x: np.zeros((_pts(t, x, 1)[1].shape[0], 1, 1, 1)),
        time_deriv_a=lambda t, x: (-ct * np.sin(_pts(t, x, 1)[0])
                                   * base(_pts(t, x, 1)[1]))[:, None, None],
        time_deriv_H=_zeros_like_mat(1),
    )
    payload = KernelPayload(
        kind="trig1dt", dim=1, scalars=np.array([c0, c1, ct]),
        drift=lambda t, x: drift(fld, t, x), sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
    )
    return MediumInstance(kind="trig1dt", base_field=fld,
                          control=ControlConstants(m=1.0 - ct, M=1.0 + ct, c2_a=ct),
                          params={"c0": c0, "c1": c1, "ct": ct},
                          payload=payload)


def make_trig1dw_medium(c0=1.0, c1=0.5, speed=1.0) -> MediumInstance:
    """Traveling-wave 1D medium: a(t,x) = c0 + c1 sin(x - speed*t).

    The coefficient profile drifts at constant speed, so the corrector is
    genuinely time-dependent (no quasi-static reduction). Control factor is
    the identity with m = c0 - c1, M = c0 + c1, C2a = c1.
    """
    if c0 - abs(c1) <= 0:
        raise ValueError("need c0 > |c1| (uniformly elliptic wave)")
    if speed != round(speed):
        raise ValueError("speed must be an integer for 2*pi time periodicity")

    def phase(t, x):
        return x[:, 0] - speed * t

    def sigma(t, x):
        t_, x_ = _pts(t, x, 1)
        return np.sqrt(c0 + c1 * np.sin(phase(t_, x_)))[:, None, None]

    fld = CoefficientField(
        dim=1, periods=(2 * np.pi, 2 * np.pi),
        bound=max(1.0, c0 + abs(c1), abs(speed)),
        sigma=sigma,
        sigma_tilde=lambda x: np.ones((np.atleast_2d(x).shape[0], 1, 1)),
        V=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        H=_zeros_like_mat(1),
        grad_V=lambda x: np.zeros(np.atleast_2d(x).shape),
        space_grad_a=lambda t, x: (c1 * np.cos(phase(*_pts(t, x, 1))))[:, None, None, None],
        space_grad_a_tilde=lambda x: np.zeros((np.atleast_2d(x).shape[0], 1, 1, 1)),
        space_grad_H=lambda t, x: np.zeros((_pts(t, x, 1)[1].shape[0], 1, 1, 1)),
        time_deriv_a=lambda t, x: (-speed * c1 * np.cos(phase(*_pts(t, x, 1))))[:, None, None],
        time_deriv_H=_zeros_like_mat(1),
    )
    payload = KernelPayload(
        kind="trig1dw", dim=1, scalars=np.array([c0, c1, speed]),
        drift=lambda t, x: drift(fld, t, x), sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
    )
    return MediumInstance(kind="trig1dw", base_field=fld,
                          control=ControlConstants(m=c0 - abs(c1), M=c0 + abs(c1),
                                                   c2_a=abs(speed) * abs(c1)),
                          params={"c0": c0, "c1": c1, "speed": speed},
                          payload=payload)


def _u_field(u_spec: dict):
    """Matrix field U on the torus and the constant G = U U^T when available."""
    kind = u_spec.get("kind", "identity")
    if kind == "identity":
        def U(t, x):
            n = np.atleast_2d(x).shape[0]
            return np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        return U, np.eye(2), 0.0
    if kind == "rotation":
        scale = float(u_spec.get("theta_scale", 1.0))
        if scale != round(scale):
            raise ValueError("theta_scale must be an integer for 2*pi periodicity")

        def U(t, x):
            t_, x_ = _pts(t, x, 2)
            th = scale * t_
            c, s = np.cos(th), np.sin(th)
            out = np.empty((t_.shape[0], 2, 2))
            out[:, 0, 0] = c
            out[:, 0, 1] = -s
            out[:, 1, 0] = s
            out[:, 1, 1] = c
            return out
        return U, np.eye(2), scale
    if kind == "diag":
        entries = np.asarray(u_spec["entries"], dtype=np.float64)
        if entries.shape != (2,):
            raise ValueError("diag U needs two entries")
        G = np.diag(entries ** 2)

        def U(t, x):
            n = np.atleast_2d(x).shape[0]
            return np.broadcast_to(np.diag(entries), (n, 2, 2)).copy()
        return U, G, None
    raise ValueError(f"unknown U field kind {kind!r}")


def make_periodic_medium(alpha: float = 1.0, u_spec: Optional[dict] = None) -> MediumInstance:
    """Degenerate periodic medium on the (t, x, y) torus of period 2*pi.

    sigma_tilde = (1-cos x)(1-cos y) Id vanishes on the cell edges;
    sigma = sigma_tilde U with U U^T pinched between alpha^{-1} Id and
    alpha Id. V = H = 0.
    """
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    u_spec = u_spec or {"kind": "identity"}
    U, G, theta_scale = _u_field(u_spec)

    # reject U violating the declared ellipticity band on a validation grid
    tt = np.linspace(0.0, 2 * np.pi, 9, endpoint=False)
    xx = np.linspace(0.0, 2 * np.pi, 9, endpoint=False)
    T, X, Y = np.meshgrid(tt, xx, xx, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    uu = U(T.ravel(), pts)
    eig = np.linalg.eigvalsh(uu @ np.swapaxes(uu, -1, -2))
    if eig.min() < 1.0 / alpha - 1e-10 or eig.max() > alpha + 1e-10:
        raise ValueError(
            f"U U^T eigenvalues in [{eig.min():.6g}, {eig.max():.6g}] violate "
            f"the [{1/alpha:.6g}, {alpha:.6g}] ellipticity band")

    def s_factor(x):
        return (1.0 - np.cos(x[:, 0])) * (1.0 - np.cos(x[:, 1]))

    def s_grad(x):
        sx = np.sin(x[:, 0]) * (1.0 - np.cos(x[:, 1]))
        sy = (1.0 - np.cos(x[:, 0])) * np.sin(x[:, 1])
        return np.stack([sx, sy], axis=1)

    def sigma(t, x):
        t_, x_ = _pts(t, x, 2)
        return s_factor(x_)[:, None, None] * U(t_, x_)

    def sigma_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return s_factor(x_)[:, None, None] * np.eye(2)

    def space_grad_a(t, x):
        t_, x_ = _pts(t, x, 2)
        # a = s^2 G with constant G: D_j a = 2 s s_j G
        s = s_factor(x_)
        g = s_grad(x_)
        return 2.0 * s[:, None, None, None] * G[None, :, :, None] * g[:, None, None, :]

    def space_grad_a_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = s_factor(x_)
        g = s_grad(x_)
        eye = np.eye(2)
        return 2.0 * s[:, None, None, None] * eye[None, :, :, None] * g[:, None, None, :]

    fld = CoefficientField(
        dim=2, periods=(2 * np.pi, 2 * np.pi, 2 * np.pi),
        bound=4.0 * np.sqrt(alpha),
        sigma=sigma, sigma_tilde=sigma_tilde,
        V=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        H=_zeros_like_mat(2),
        grad_V=lambda x: np.zeros(np.atleast_2d(x).shape),
        space_grad_a=space_grad_a,
        space_grad_a_tilde=space_grad_a_tilde,
        space_grad_H=lambda t, x: np.zeros((_pts(t, x, 2)[1].shape[0], 2, 2, 2)),
        time_deriv_a=_zeros_like_mat(2),
        time_deriv_H=_zeros_like_mat(2),
    )
    u_kind = u_spec.get("kind", "identity")
    payload = KernelPayload(
        kind="periodic31", dim=2,
        scalars=np.array([0.0 if u_kind == "identity" else 1.0,
                          theta_scale if theta_scale else 0.0]),
        drift=lambda t, x: drift(fld, t, x), sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
        compiled_ok=u_kind in ("identity", "rotation"),
    )
    return MediumInstance(kind="periodic31", base_field=fld,
                          control=ControlConstants(m=1.0 / alpha, M=alpha),
                          params={"alpha": alpha, "u": dict(u_spec)},
                          payload=payload)


# ---------------------------------------------------------------------------
# chessboard medium
# ---------------------------------------------------------------------------

def _sample_colors(seed, n_cells, k_lo, purpose, p):
    # cell k keeps its color under extent changes: the stream is keyed by the
    # absolute cell index (offset to stay unsigned)
    ks = np.arange(k_lo, k_lo + n_cells, dtype=np.int64) + (1 << 40)
    u = kernels.uniforms(seed, ks.astype(np.uint64), 0, purpose, 1)[:, 0]
    return (u < p).astype(np.int8)


class _Stripe:
    """Mollified shifted Bernoulli stripe process on one axis."""

    def __init__(self, colors, k_lo, shift, mollifier: MollifierSpec, periodic):
        self.colors = np.asarray(colors, dtype=np.int8)
        self.k_lo = int(k_lo)
        self.shift = float(shift)
        self.mol = mollifier
        self.periodic = bool(periodic)

    def _indices(self, g):
        y = np.asarray(g, dtype=np.float64) + self.shift
        j = np.floor(y)
        frac = y - j
        jj = j.astype(np.int64) - self.k_lo
        n = self.colors.shape[0]
        if self.periodic:
            jj = np.mod(jj, n)
            jm = np.mod(jj - 1, n)
            jp = np.mod(jj + 1, n)
        else:
            if jj.size and (jj.min() < 1 or jj.max() > n - 2):
                raise ExtentError(
                    "stripe evaluation outside the sampled extent "
                    f"[{self.k_lo + 1}, {self.k_lo + n - 1})")
            jm = jj - 1
            jp = jj + 1
        return frac, jj, jm, jp

    def value(self, g):
        frac, jj, jm, jp = self._indices(g)
        r = self.mol.support_radius
        c = self.colors.astype(np.float64)
        out = c[jj].copy()
        lo = frac < r
        hi = frac > 1.0 - r
        out[lo] = c[jm[lo]] + (c[jj[lo]] - c[jm[lo]]) * self.mol.antiderivative(frac[lo])
        out[hi] = c[jj[hi]] + (c[jp[hi]] - c[jj[hi]]) * self.mol.antiderivative(frac[hi] - 1.0)
        return out

    def deriv(self, g):
        frac, jj, jm, jp = self._indices(g)
        r = self.mol.support_radius
        c = self.colors.astype(np.float64)
        out = np.zeros_like(frac)
        lo = frac < r
        hi = frac > 1.0 - r
        out[lo] = (c[jj[lo]] - c[jm[lo]]) * self.mol.phi(frac[lo])
        out[hi] = (c[jp[hi]] - c[jj[hi]]) * self.mol.phi(frac[hi] - 1.0)
        return out


def make_chessboard_medium(p: float, mollifier: Optional[MollifierSpec] = None,
                           seed: int = 0, extent=64, periodic: bool = False,
                           _randomness: Optional[dict] = None) -> MediumInstance:
    """Random stripe medium in two space dimensions.

    The realization is three independent mollified Bernoulli stripe processes
    beta(t), alpha1(x1), alpha2(x2) with color probability ``p``:
    sigma_tilde = diag(1, alpha1), V = 0, and stream matrix
    H_12 = alpha1^2 beta. ``extent`` is the sampled box half-width in unit
    cells per axis; evaluation outside it raises ``ExtentError`` unless
    ``periodic`` wraps the colors (large-torus periodization).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    mol = mollifier or MollifierSpec()
    if np.isscalar(extent):
        extent = (int(extent),) * 3
    n_cells = tuple(int(e) for e in extent)
    if min(n_cells) < 4:
        raise ValueError("extent must be at least 4 cells per axis")
    k_lo = tuple(-(n // 2) for n in n_cells)

    if _randomness is None:
        purposes = (kernels.PURPOSE_COLOR_T, kernels.PURPOSE_COLOR_X1,
                    kernels.PURPOSE_COLOR_X2)
        colors = [_sample_colors(seed, n_cells[i], k_lo[i], purposes[i], p)
                  for i in range(3)]
        shifts = kernels.uniforms(seed, np.zeros(1, dtype=np.uint64), 0,
                                  kernels.PURPOSE_USHIFT, 3)[0]
        randomness = {"colors_t": colors[0], "colors_x1": colors[1],
                      "colors_x2": colors[2], "shift": shifts, "seed": seed,
                      "k_lo": k_lo}
    else:
        randomness = _randomness
        colors = [np.asarray(randomness["colors_t"], dtype=np.int8),
                  np.asarray(randomness["colors_x1"], dtype=np.int8),
                  np.asarray(randomness["colors_x2"], dtype=np.int8)]
        shifts = np.asarray(randomness["shift"], dtype=np.float64)
        k_lo = tuple(randomness["k_lo"])

    beta = _Stripe(colors[0], k_lo[0], shifts[0], mol, periodic)
    alpha1 = _Stripe(colors[1], k_lo[1], shifts[1], mol, periodic)
    alpha2 = _Stripe(colors[2], k_lo[2], shifts[2], mol, periodic)

    def sigma(t, x):
        t_, x_ = _pts(t, x, 2)
        a1 = alpha1.value(x_[:, 0])
        out = np.zeros((x_.shape[0], 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = a1
        return out

    def sigma_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a1 = alpha1.value(x_[:, 0])
        out = np.zeros((x_.shape[0], 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = a1
        return out

    def H(t, x):
        t_, x_ = _pts(t, x, 2)
        h = alpha1.value(x_[:, 0]) ** 2 * beta.value(t_)
        out = np.zeros((x_.shape[0], 2, 2))
        out[:, 0, 1] = h
        out[:, 1, 0] = -h
        return out

    def space_grad_a(t, x):
        t_, x_ = _pts(t, x, 2)
        out = np.zeros((x_.shape[0], 2, 2, 2))
        out[:, 1, 1, 0] = 2.0 * alpha1.value(x_[:, 0]) * alpha1.deriv(x_[:, 0])
        return out

    def space_grad_a_tilde(x):
        x_ = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros((x_.shape[0], 2, 2, 2))
        out[:, 1, 1, 0] = 2.0 * alpha1.value(x_[:, 0]) * alpha1.deriv(x_[:, 0])
        return out

    def space_grad_H(t, x):
        t_, x_ = _pts(t, x, 2)
        a1 = alpha1.value(x_[:, 0])
        d1 = alpha1.deriv(x_[:, 0])
        bt = beta.value(t_)
        out = np.zeros((x_.shape[0], 2, 2, 2))
        out[:, 0, 1, 0] = 2.0 * a1 * d1 * bt
        out[:, 1, 0, 0] = -2.0 * a1 * d1 * bt
        return out

    def time_deriv_H(t, x):
        t_, x_ = _pts(t, x, 2)
        h = alpha1.value(x_[:, 0]) ** 2 * beta.deriv(t_)
        out = np.zeros((x_.shape[0], 2, 2))
        out[:, 0, 1] = h
        out[:, 1, 0] = -h
        return out

    phi_max = float(mol.phi(0.0))
    fld = CoefficientField(
        dim=2,
        periods=tuple(float(n) for n in n_cells) if periodic else None,
        bound=max(1.0, phi_max),
        sigma=sigma, sigma_tilde=sigma_tilde,
        V=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        H=H,
        grad_V=lambda x: np.zeros(np.atleast_2d(x).shape),
        space_grad_a=space_grad_a,
        space_grad_a_tilde=space_grad_a_tilde,
        space_grad_H=space_grad_H,
        time_deriv_a=_zeros_like_mat(2),
        time_deriv_H=time_deriv_H,
    )
    payload = KernelPayload(
        kind="chessboard", dim=2,
        scalars=np.array([mol.support_radius, shifts[1], shifts[0],
                          mol.normalization, 1.0 if periodic else 0.0]),
        colors_t=colors[0], colors_1=colors[1],
        lo_t=k_lo[0], lo_1=k_lo[1],
        cheb=mol.antiderivative_coefficients(),
        drift=lambda t, x: drift(fld, t, x), sigma=fld.sigma,
        drift_control=lambda t, x: drift_control(fld, x),
        sigma_control=lambda t, x: fld.sigma_tilde(x),
    )
    consts = ControlConstants(m=1.0, M=1.0, c1_h=1.0, c2_h=phi_max, c2_a=0.0)
    return MediumInstance(kind="chessboard", base_field=fld, control=consts,
                          params={"p": p, "extent": list(n_cells),
                                  "periodic": periodic,
                                  "mollifier": mol.to_dict()},
                          payload=payload, randomness=randomness, seed=seed)


# ---------------------------------------------------------------------------
# control-assumption validation
# ---------------------------------------------------------------------------

def _matrix_abs(Hs):
    """|A| = sqrt(-A^2) for batched antisymmetric matrices."""
    M2 = -np.einsum("nij,njk->nik", Hs, Hs)
    vals, vecs = np.linalg.eigh(M2)
    vals = np.sqrt(np.clip(vals, 0.0, None))
    return np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)


def _direction_set(dim, n_random=8):
    dirs = list(np.eye(dim))
    for i in range(dim):
        for j in range(i + 1, dim):
            v = np.zeros(dim)
            v[i] = v[j] = 1.0
            dirs.append(v / np.sqrt(2))
            v = v.copy()
            v[j] = -1.0
            dirs.append(v / np.sqrt(2))
    extra = kernels.normals(0xD1CE, np.arange(n_random, dtype=np.uint64), 0,
                            kernels.PURPOSE_MISC, dim)
    for v in extra:
        dirs.append(v / np.linalg.norm(v))
    return np.array(dirs)


@dataclass
class ControlReport:
    margins: dict
    passed: bool
    tol: float
    resolution: int
    min_a_eigenvalue: float

    def __str__(self):
        lines = [f"control check ({'pass' if self.passed else 'FAIL'}, tol {self.tol:g})"]
        for k, v in self.margins.items():
            lines.append(f"  {k:>14s}: worst margin {v:+.3e}")
        lines.append(f"  min eig(a) on grid: {self.min_a_eigenvalue:.3e}")
        return "\n".join(lines)


def _sample_points(field: CoefficientField, resolution: int):
    if field.periods is not None:
        axes = [np.linspace(0.0, P, resolution, endpoint=False) for P in field.periods]
    else:
        # finite extent: stay one cell inside the sampled box
        axes = [np.linspace(-resolution / 4, resolution / 4, resolution)
                for _ in range(field.dim + 1)]
    grids = np.meshgrid(*axes, indexing="ij")
    t = grids[0].ravel()
    x = np.column_stack([g.ravel() for g in grids[1:]])
    return t, x


def validate_control(field: CoefficientField, constants: ControlConstants,
                     resolution: int = 16, tol: float = 1e-10) -> ControlReport:
    """Pointwise quadratic-form check of the control inequalities.

    Matrix inequalities are tested as v^T (.) v >= -tol over a fixed direction
    set, which stays meaningful where the control matrix degenerates.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2 per axis")
    t, x = _sample_points(field, resolution)
    a = field.a(t, x)
    at = field.a_tilde(x)
    absH = _matrix_abs(field.H(t, x))
    absHt = _matrix_abs(field.time_deriv_H(t, x))
    da_t = field.time_deriv_a(t, x)
    abs_dat = _matrix_abs_sym(da_t)
    dirs = _direction_set(field.dim)

    def worst(Ms):
        # min over points and directions of v^T M v
        q = np.einsum("ki,nij,kj->nk", dirs, Ms, dirs)
        return float(q.min())

    margins = {
        "m*at <= a": worst(a - constants.m * at),
        "a <= M*at": worst(constants.M * at - a),
        "|H| <= c1*at": worst(constants.c1_h * at - absH),
        "|DtH| <= c2h*at": worst(constants.c2_h * at - absHt),
        "|Dta| <= c2a*at": worst(constants.c2_a * at - abs_dat),
    }
    passed = all(v >= -tol for v in margins.values())
    return ControlReport(margins=margins, passed=passed, tol=tol,
                         resolution=resolution,
                         min_a_eigenvalue=float(np.linalg.eigvalsh(a).min()))


def _matrix_abs_sym(Ms):
    """|A| for batched symmetric matrices (eigenvalue absolute value)."""
    vals, vecs = np.linalg.eigh(Ms)
    return np.einsum("nij,nj,nkj->nik", vecs, np.abs(vals), vecs)


def fit_control_constants(field: CoefficientField, resolution: int = 16,
                          rel_floor: float = 1e-12) -> ControlConstants:
    """Smallest admissible control constants on a sample grid.

    Ratios v^T M v / v^T a_tilde v are maximized over a direction set;
    directions where a_tilde essentially vanishes count only if the numerator
    does not (then the constant is infinite and the fit fails).
    """
    t, x = _sample_points(field, resolution)
    a = field.a(t, x)
    at = field.a_tilde(x)
    dirs = _direction_set(field.dim)
    qat = np.einsum("ki,nij,kj->nk", dirs, at, dirs)
    scale = float(qat.max()) * rel_floor

    def ratio(Ms, lower=False):
        q = np.einsum("ki,nij,kj->nk", dirs, Ms, dirs)
        ok = qat > scale
        if np.any(~ok & (np.abs(q) > scale)):
            raise ValueError("control matrix degenerates where the target does not")
        vals = q[ok] / qat[ok]
        if vals.size == 0:
            return 0.0
        return float(vals.min() if lower else vals.max())

    m = ratio(a, lower=True)
    M = ratio(a)
    c1 = ratio(_matrix_abs(field.H(t, x)))
    c2h = ratio(_matrix_abs(field.time_deriv_H(t, x)))
    c2a = ratio(_matrix_abs_sym(field.time_deriv_a(t, x)))
    return ControlConstants(m=max(m, rel_floor), M=max(M, m, rel_floor),
                            c1_h=c1, c2_h=c2h, c2_a=c2a)


# ---------------------------------------------------------------------------
# cell averages and named observables
# ---------------------------------------------------------------------------

def cell_average(medium: MediumInstance, f: Callable, resolution: int = 64):
    """Invariant-measure average of f(field, t, x) over one cell by quadrature."""
    field = medium.field
    if field.periods is None:
        raise ValueError("cell_average needs a periodic medium")
    axes = [np.arange(resolution) * (P / resolution) for P in field.periods]
    grids = np.meshgrid(*axes, indexing="ij")
    t = grids[0].ravel()
    x = np.column_stack([g.ravel() for g in grids[1:]])
    w = field.weight(x)
    return float(np.sum(w * f(field, t, x)) / np.sum(w))


OBSERVABLES = {
    "one": lambda field, t, x: np.ones(np.atleast_2d(x).shape[0]),
    "V": lambda field, t, x: field.V(x),
    "a11": lambda field, t, x: field.a(t, x)[:, 0, 0],
    "a_tilde11": lambda field, t, x: field.a_tilde(x)[:, 0, 0],
    "sin1": lambda field, t, x: np.sin(np.atleast_2d(x)[:, 0]),
}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_medium(medium: MediumInstance, path):
    """Persist a medium description (including sampled randomness) as JSON."""
    from . import jsonio

    doc = {"schema": "homlab/medium/1", "kind": medium.kind,
           "params": _jsonable(medium.params), "seed": medium.seed,
           "origin": {"t": medium.origin_t, "x": list(medium.origin_x)}}
    if medium.randomness is not None:
        doc["randomness"] = {
            "colors_t": [int(c) for c in medium.randomness["colors_t"]],
            "colors_x1": [int(c) for c in medium.randomness["colors_x1"]],
            "colors_x2": [int(c) for c in medium.randomness["colors_x2"]],
            "shift": list(medium.randomness["shift"]),
            "k_lo": list(medium.randomness["k_lo"]),
            "seed": medium.randomness["seed"],
        }
    jsonio.dump(doc, path)
    return doc


def load_medium(path) -> MediumInstance:
    from . import jsonio

    doc = jsonio.load(path)
    if doc.get("schema") != "homlab/medium/1":
        raise ValueError(f"not a medium file: {path}")
    med = build_medium({"kind": doc["kind"], **doc["params"], "seed": doc.get("seed", 0)},
                       _randomness=doc.get("randomness"))
    origin = doc.get("origin", {"t": 0.0, "x": [0.0] * med.dim})
    return replace(med, origin_t=float(origin["t"]),
                   origin_x=np.asarray(origin["x"], dtype=np.float64))


def build_medium(section: dict, _randomness=None) -> MediumInstance:
    """Construct a medium from a config section (CLI entry point)."""
    sec = dict(section)
    kind = sec.pop("kind", None)
    seed = int(sec.pop("seed", 0))
    if kind == "constant":
        known = {k: sec.pop(k) for k in ("sigma", "b", "H") if k in sec}
        _reject_unknown(kind, sec)
        if "sigma" not in known:
            raise ValueError("constant medium needs 'sigma'")
        return make_constant_medium(np.asarray(known["sigma"], dtype=np.float64),
                                    b=known.get("b"), H=known.get("H"))
    if kind == "trig1d":
        known = {k: sec.pop(k) for k in ("c0", "c1", "c2", "v1", "v2") if k in sec}
        _reject_unknown(kind, sec)
        return make_trig1d_medium(**known)
    if kind == "trig1dt":
        known = {k: sec.pop(k) for k in ("c0", "c1", "ct") if k in sec}
        _reject_unknown(kind, sec)
        return make_trig1dt_medium(**known)
    if kind == "trig1dw":
        known = {k: sec.pop(k) for k in ("c0", "c1", "speed") if k in sec}
        _reject_unknown(kind, sec)
        return make_trig1dw_medium(**known)
    if kind == "periodic31":
        known = {"alpha": sec.pop("alpha", 1.0), "u_spec": sec.pop("u", None)}
        _reject_unknown(kind, sec)
        return make_periodic_medium(**known)
    if kind == "chessboard":
        mol = sec.pop("mollifier", None)
        mol = MollifierSpec.from_dict(mol) if isinstance(mol, dict) else mol
        known = {"p": sec.pop("p"), "seed": seed,
                 "extent": sec.pop("extent", 64),
                 "periodic": sec.pop("periodic", False), "mollifier": mol}
        _reject_unknown(kind, sec)
        return make_chessboard_medium(**known, _randomness=_randomness)
    raise ValueError(f"unknown medium kind {kind!r}")


def _reject_unknown(kind, leftover):
    if leftover:
        raise ValueError(f"unknown keys for medium kind {kind!r}: {sorted(leftover)}")
