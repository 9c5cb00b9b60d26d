"""Regularized cell correctors and the effective diffusivity matrix.

For a periodic medium the resolvent problem

    lam * u - L u - theta * D_t u - (delta/2) D_t^2 u = h,
    L = 1/2 e^{2V} div( e^{-2V} [a + H] grad . ),

is discretized in flux form with centered differences on a (t, x) cell grid
and solved matrix-free with preconditioned GMRES. The operator is the exact
weighted adjoint of the bilinear form

    B(u, v) = lam (u,v) + 1/2 ([a+H] grad u, grad v) - theta (D_t u, v)
              + delta/2 (D_t u, D_t v),

so energy identities hold to solver tolerance, not discretization tolerance:
testing v = u kills the H and D_t terms exactly and yields the a-priori bound
lam |u|^2 + m ||u||_1^2 <= |h|^2 / lam checked on every solve.

The transport direction D_t has no coercivity of its own; solves at delta = 0
are reached by a continuation delta_0 / 4^k warm-starting each GMRES, which
mirrors the vanishing-viscosity construction of the solution.

Corrector gradients are extrapolated linearly in lam over a geometric
schedule, and the effective matrix is the weighted cell average

    A = < (sigma + Xi)(sigma + Xi)^T >_pi,   Xi_ij = (sigma^T grad u^i)_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import linalg as spla

from .grid import CellDiscretization, GridFunction
from .medium import MediumInstance, drift

__all__ = [
    "CellOperator", "CorrectorSolution", "EffectiveDiffusivity", "SolverError",
    "discretize", "assemble_apply", "solve_corrector", "solve_corrector_family",
    "discrete_norms", "h_minus_one_norm", "extrapolate_gradient",
    "effective_matrix", "corrector_diffusivity",
]


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


def discretize(medium: MediumInstance, shape) -> CellDiscretization:
    return CellDiscretization(medium, shape)


class CellOperator:
    """Matrix-free strong form of lam - L - theta D_t - (delta/2) D_t^2."""

    def __init__(self, disc: CellDiscretization, lam: float, delta: float = 0.0,
                 theta: int = 1, use_a_tilde: bool = False):
        if lam < 0 or delta < 0 or theta not in (0, 1):
            raise ValueError("need lam >= 0, delta >= 0, theta in {0, 1}")
        self.disc = disc
        self.lam = float(lam)
        self.delta = float(delta)
        self.theta = int(theta)
        d = disc.dim
        self.coeff = disc.a_tilde if use_a_tilde else disc.a + disc.H
        self.use_a_tilde = use_a_tilde
        self._shape = disc.cell.shape
        self.n = disc.cell.n_nodes

    def apply_grid(self, u: np.ndarray) -> np.ndarray:
        disc = self.disc
        g = disc.grad(u)
        flux = np.einsum("...ij,...j->...i", self.coeff, g)
        out = self.lam * u - 0.5 * disc.div_weighted(flux)
        if self.theta:
            out -= disc.dt(u)
        if self.delta:
            out -= 0.5 * self.delta * disc.dt(disc.dt(u))
        return out

    def __call__(self, u):
        return self.apply_grid(u)

    def weak_form(self, u: np.ndarray, v: np.ndarray) -> float:
        """B(u, v); equals <apply(u), v>_pi by the discrete adjoint identities."""
        disc = self.disc
        gu, gv = disc.grad(u), disc.grad(v)
        q = np.einsum("...ij,...j,...i->...", self.coeff, gu, gv)
        val = self.lam * disc.inner(u, v) + 0.5 * float(np.mean(disc.weight * q))
        if self.theta:
            val -= disc.inner(disc.dt(u), v)
        if self.delta:
            val += 0.5 * self.delta * disc.inner(disc.dt(u), disc.dt(v))
        return val

    # -- linear solving --------------------------------------------------------

    def as_linear_operator(self) -> spla.LinearOperator:
        shape = self._shape

        def mv(vec):
            return self.apply_grid(vec.reshape(shape)).ravel()

        return spla.LinearOperator((self.n, self.n), matvec=mv)

    def diagonal(self) -> np.ndarray:
        """Exact diagonal of the discrete operator (for Jacobi preconditioning).

        Only the same-axis second differences and the zeroth-order term reach
        the diagonal; cross terms, the stream part, and D_t never touch the
        center node of the wide centered stencil. The diagonal follows the
        local coefficient, which is what keeps the preconditioner effective
        where the medium degenerates.
        """
        disc = self.disc
        hs = disc.cell.spacing
        w = disc.weight
        diag = np.full(self._shape, self.lam)
        for i in range(disc.dim):
            ax = 1 + i
            if self._shape[ax] == 1:
                continue
            aw = w * self.coeff[..., i, i]
            diag += (np.roll(aw, -1, axis=ax) + np.roll(aw, 1, axis=ax)) \
                / (2.0 * (2.0 * hs[ax]) ** 2 * w)
        if self.delta and self._shape[0] > 1:
            diag += self.delta * (np.roll(w, -1, axis=0) + np.roll(w, 1, axis=0)) \
                / (2.0 * (2.0 * hs[0]) ** 2 * w)
        return diag

    def jacobi_preconditioner(self) -> spla.LinearOperator:
        inv = 1.0 / self.diagonal()
        shape = self._shape

        def mv(vec):
            return (vec.reshape(shape) * inv).ravel()

        return spla.LinearOperator((self.n, self.n), matvec=mv)

    def fourier_preconditioner(self) -> spla.LinearOperator:
        """Inverse constant-coefficient symbol (mean diffusion, exact transport).

        Complements the diagonal: it captures the skew D_t coupling that the
        diagonal cannot see, but flattens the coefficient profile, so it loses
        to Jacobi when the medium degenerates.
        """
        disc = self.disc
        shape = self._shape
        hs = disc.cell.spacing
        mean_diag = [float(np.mean(disc.weight * self.coeff[..., i, i]))
                     for i in range(disc.dim)]
        sym = np.zeros(shape, dtype=np.complex128)
        for axis, N in enumerate(shape):
            k = np.fft.fftfreq(N) * N
            s = np.sin(2.0 * np.pi * k / N) / hs[axis]
            shape_axis = [1] * len(shape)
            shape_axis[axis] = N
            s = s.reshape(shape_axis)
            if axis == 0:
                if self.theta:
                    sym = sym - 1j * s
                if self.delta:
                    sym = sym + 0.5 * self.delta * s * s
            else:
                sym = sym + 0.5 * mean_diag[axis - 1] * s * s
        inv = 1.0 / (sym + self.lam)

        def mv(vec):
            return np.real(np.fft.ifftn(np.fft.fftn(vec.reshape(shape)) * inv)).ravel()

        return spla.LinearOperator((self.n, self.n), matvec=mv)

    def solve(self, rhs: np.ndarray, rtol: float = 1e-10, max_iter: int = 20000,
              x0: Optional[np.ndarray] = None):
        """Krylov solve of apply(u) = rhs; returns (u, residual_norm, matvecs).

        Matrix-free LGMRES. The first preconditioner is chosen by how
        degenerate the diffusion matrix is on the grid; if the solve stalls,
        it continues warm-started under the complementary preconditioner.
        residual_norm is the weighted l2 norm of the strong residual.
        """
        b = rhs.ravel()
        if np.linalg.norm(b) == 0.0:
            return np.zeros(self._shape), 0.0, 0
        count = {"n": 0}
        shape = self._shape

        def mv(vec):
            count["n"] += 1
            return self.apply_grid(vec.reshape(shape)).ravel()

        op = spla.LinearOperator((self.n, self.n), matvec=mv)
        rhs_norm = self.disc.l2(rhs)
        mean_a = float(np.mean(np.trace(self.disc.a, axis1=-2, axis2=-1))) / self.disc.dim
        degenerate = self.disc.min_a_eig < 0.05 * max(mean_a, 1e-300)
        stages = [self.jacobi_preconditioner, self.fourier_preconditioner]
        if not degenerate:
            stages.reverse()
        x = None if x0 is None else x0.ravel()
        history = []
        for stage, make_m in enumerate(stages):
            budget = max_iter // (3 - stage * 2) if len(stages) > 1 else max_iter
            x, _ = spla.lgmres(op, b, x0=x, rtol=rtol, atol=0.0, M=make_m(),
                               maxiter=max(1, budget // 30), inner_m=30)
            res_norm = self.disc.l2(self.apply_grid(x.reshape(shape)) - rhs)
            history.append(res_norm)
            if res_norm <= rtol * rhs_norm:
                break
        if history[-1] > rtol * 10 * rhs_norm:
            raise SolverError(
                f"Krylov solve did not converge after {count['n']} matvecs: "
                f"residual history {['%.3e' % r for r in history]} vs rhs {rhs_norm:.3e}",
                residuals=history)
        return x.reshape(shape), history[-1], count["n"]


def assemble_apply(medium: MediumInstance, lam: float, delta: float = 0.0,
                   theta: int = 1, shape=None, disc: Optional[CellDiscretization] = None):
    """Matrix-free operator for the regularized resolvent on a cell grid."""
    if disc is None:
        if shape is None:
            raise ValueError("pass a grid shape or a discretization")
        disc = CellDiscretization(medium, shape)
    return CellOperator(disc, lam, delta, theta)


# ---------------------------------------------------------------------------
# corrector solves
# ---------------------------------------------------------------------------

@dataclass
class CorrectorSolution:
    coordinate: int
    lam: float
    delta: float
    u: GridFunction
    grad_sigma_u: GridFunction        # trailing axis: noise directions
    residual_norm: float
    iterations: int
    l2_norm: float
    h1_norm: float
    energy_lhs: float                 # lam |u|_2^2 + m ||u||_1^2
    energy_rhs: float                 # |h|_2^2 / lam
    delta_history: list = dc_field(default_factory=list)

    @property
    def energy_ok(self) -> bool:
        return self.energy_lhs <= self.energy_rhs * (1.0 + 1e-8)


def _rhs_drift(disc: CellDiscretization, coordinate: int) -> np.ndarray:
    t, x = disc.cell.nodes()
    b = drift(disc.medium.field, t, x)
    return b[:, coordinate].reshape(disc.cell.shape)


def solve_corrector(medium: MediumInstance, coordinate: int, lam: float,
                    delta: float = 0.0, shape=None,
                    disc: Optional[CellDiscretization] = None,
                    rhs: Optional[np.ndarray] = None,
                    rtol: float = 1e-10, max_iter: int = 4000,
                    delta0: float = 0.1, x0: Optional[np.ndarray] = None,
                    continuation: bool = True) -> CorrectorSolution:
    """Solve the regularized corrector problem for one coordinate.

    For delta = 0 (the equation of interest) the solver walks delta0 / 4^k
    down to the target, warm-starting each stage, and records the control-norm
    distances between consecutive stages in ``delta_history``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if disc is None:
        if shape is None:
            raise ValueError("pass a grid shape or a discretization")
        disc = CellDiscretization(medium, shape)
    h = _rhs_drift(disc, coordinate) if rhs is None else rhs

    time_resolved = disc.cell.shape[0] > 1
    deltas: list[float]
    if continuation and time_resolved and delta0 > delta:
        deltas = []
        dd = delta0
        while dd > max(delta, 1e-4):
            deltas.append(dd)
            dd /= 4.0
        deltas.append(delta)
    else:
        deltas = [delta]

    u = x0
    history = []
    prev = None
    iterations = 0
    for dd in deltas:
        op = CellOperator(disc, lam, dd, theta=1)
        u, res_norm, its = op.solve(h, rtol=rtol, max_iter=max_iter, x0=u)
        iterations += its
        if prev is not None:
            history.append((dd, disc.h1_tilde(u - prev)))
        prev = u

    l2 = disc.l2(u)
    h1 = disc.h1_tilde(u)
    m = medium.control.m
    sol = CorrectorSolution(
        coordinate=coordinate, lam=lam, delta=delta,
        u=GridFunction(disc.cell, u),
        grad_sigma_u=GridFunction(disc.cell, disc.grad_sigma(u)),
        residual_norm=res_norm, iterations=iterations,
        l2_norm=l2, h1_norm=h1,
        energy_lhs=lam * l2 ** 2 + m * h1 ** 2,
        energy_rhs=disc.l2(h) ** 2 / lam,
        delta_history=history,
    )
    if not sol.energy_ok:
        raise SolverError(
            f"energy bound violated: {sol.energy_lhs:.6e} > {sol.energy_rhs:.6e} "
            f"(lam={lam:g}, coordinate={coordinate})")
    return sol


def solve_corrector_family(medium: MediumInstance, coordinate: int,
                           lambdas: Sequence[float], shape=None,
                           disc: Optional[CellDiscretization] = None,
                           **kw) -> list[CorrectorSolution]:
    """Solutions over a decreasing lambda schedule, warm-started in order."""
    if disc is None:
        disc = CellDiscretization(medium, shape)
    lams = sorted(float(l) for l in lambdas)[::-1]
    sols = []
    x0 = None
    for lam in lams:
        sol = solve_corrector(medium, coordinate, lam, disc=disc, x0=x0, **kw)
        sols.append(sol)
        x0 = sol.u.values
    return sols


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def discrete_norms(u: GridFunction, medium: MediumInstance,
                   disc: Optional[CellDiscretization] = None):
    """Weighted l2 norm and the control-operator seminorm of a grid function."""
    if disc is None:
        disc = CellDiscretization(medium, u.cell.shape)
    return disc.l2(u.values), disc.h1_tilde(u.values)


def h_minus_one_norm(h: GridFunction, medium: MediumInstance,
                     disc: Optional[CellDiscretization] = None,
                     mean_tol: float = 1e-10, reg: float = 1e-8) -> float:
    """Dual norm of a mean-zero function against the control seminorm.

    Solves the (slightly regularized) control resolvent (reg - S_tilde) w = h
    and returns sqrt(<w, h>_pi). Fails when h carries a weighted mean, which
    has no finite dual norm.
    """
    if disc is None:
        disc = CellDiscretization(medium, h.cell.shape)
    vals = h.values
    scale = disc.l2(vals)
    if scale == 0.0:
        return 0.0
    mean = abs(disc.pi_mean(vals))
    if mean > mean_tol * max(scale, 1.0):
        raise ValueError(
            f"weighted mean {mean:.3e} of the right-hand side is not negligible; "
            "a finite dual norm requires a centered function")
    lam_reg = reg * max(float(np.mean(np.trace(disc.a_tilde, axis1=-2, axis2=-1))), 1e-30)
    op = CellOperator(disc, lam_reg, 0.0, theta=0, use_a_tilde=True)
    w, _, _ = op.solve(vals, rtol=1e-12, max_iter=8000)
    val = disc.inner(w, vals)
    return float(np.sqrt(max(val, 0.0)))


# ---------------------------------------------------------------------------
# lambda extrapolation and the effective matrix
# ---------------------------------------------------------------------------

def extrapolate_gradient(solutions: Sequence[CorrectorSolution]):
    """Linear-in-lambda extrapolation of the corrector gradient field.

    Expects >= 3 solutions on a geometric lambda schedule. Returns the
    extrapolated gradient (a GridFunction), an error estimate from the last
    two gradient differences, and the lam |u|^2 sequence with its
    monotonicity flag (the testable shadow of the vanishing-lambda theory).
    """
    if len(solutions) < 3:
        raise ValueError("need at least 3 solutions for extrapolation")
    sols = sorted(solutions, key=lambda s: -s.lam)
    lams = np.array([s.lam for s in sols])
    ratios = lams[:-1] / lams[1:]
    if not np.allclose(ratios, ratios[0], rtol=1e-6):
        raise ValueError("lambda schedule must be geometric")
    g = [s.grad_sigma_u.values for s in sols]
    d_last = np.sqrt(np.mean((g[-1] - g[-2]) ** 2))
    d_prev = np.sqrt(np.mean((g[-2] - g[-3]) ** 2))
    if d_prev > 0 and d_last > d_prev * (1.0 + 1e-9):
        raise SolverError(
            f"corrector gradients diverge along lambda: {d_prev:.3e} -> {d_last:.3e}; "
            "the control assumption may fail or the grid is under-resolved")
    l1, l2_ = sols[-2].lam, sols[-1].lam
    xi = g[-1] + (g[-2] - g[-1]) * (l2_ / (l2_ - l1))
    err = d_last * (l2_ / (l1 - l2_))
    seq = [s.lam * s.l2_norm ** 2 for s in sols]
    floor = 1e-13 * max(max(seq), 1e-300)   # zero right-hand sides give zero sequences
    monotone = all(seq[i + 1] < seq[i] * (1.0 + 1e-12) + floor for i in range(len(seq) - 1))
    cell = sols[0].u.cell
    return GridFunction(cell, xi), float(err), {"lam_u2": seq, "monotone": monotone}


@dataclass
class EffectiveDiffusivity:
    A: np.ndarray
    method: str                    # "corrector" or "monte_carlo"
    ci: np.ndarray                 # per-entry half-widths / error estimate
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.ci = np.asarray(self.ci, dtype=np.float64)
        if not np.allclose(self.A, self.A.T, atol=1e-10):
            raise ValueError("effective matrix must be symmetric")
        if np.linalg.eigvalsh(self.A).min() < -1e-10:
            raise ValueError("effective matrix must be positive semidefinite")

    def to_dict(self) -> dict:
        return {"schema": "homlab/diffusivity/1", "method": self.method,
                "A": self.A.tolist(), "ci": self.ci.tolist(),
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveDiffusivity":
        if d.get("schema") != "homlab/diffusivity/1":
            raise ValueError("not an effective-diffusivity document")
        return cls(A=np.asarray(d["A"]), method=d["method"],
                   ci=np.asarray(d["ci"]), meta=d.get("meta", {}))


def effective_matrix(medium: MediumInstance, xis: Sequence[GridFunction],
                     error_estimates: Optional[Sequence[float]] = None,
                     disc: Optional[CellDiscretization] = None) -> EffectiveDiffusivity:
    """Weighted cell average of (sigma + Xi)(sigma + Xi)^T.

    ``xis[i]`` is the extrapolated noise-direction gradient of the coordinate-i
    corrector; row i of Xi is xis[i].
    """
    if disc is None:
        disc = CellDiscretization(medium, xis[0].cell.shape)
    d = disc.dim
    if len(xis) != d:
        raise ValueError(f"need {d} gradient fields, got {len(xis)}")
    G = disc.sigma.copy()
    for i in range(d):
        G[..., i, :] += xis[i].values
    prod = np.einsum("...ik,...jk->...ij", G, G)
    w = disc.weight[..., None, None]
    A = (w * prod).reshape(-1, d, d).mean(axis=0)
    A = 0.5 * (A + A.T)
    if error_estimates is None:
        ci = np.zeros((d, d))
    else:
        # first-order propagation of the per-coordinate gradient error
        est = np.asarray(error_estimates)
        gn = np.array([np.sqrt((disc.weight[..., None] * (G[..., i, :] ** 2)).mean())
                       for i in range(d)])
        ci = np.add.outer(est * gn, est * gn) + np.outer(est, est)
    return EffectiveDiffusivity(A=A, method="corrector", ci=ci,
                                meta={"grid": list(disc.cell.shape)})


def corrector_diffusivity(medium: MediumInstance, shape,
                          lambdas: Sequence[float] = (1e-2, 1e-3, 1e-4),
                          rtol: float = 1e-10, max_iter: int = 4000,
                          delta0: float = 0.1):
    """Full pipeline: solve all coordinates over the lambda schedule,
    extrapolate, and assemble A. Returns (EffectiveDiffusivity, diagnostics)."""
    disc = CellDiscretization(medium, shape)
    xis, errs, lam_curves, solutions = [], [], [], []
    for i in range(disc.dim):
        sols = solve_corrector_family(medium, i, lambdas, disc=disc, rtol=rtol,
                                      max_iter=max_iter, delta0=delta0)
        xi, err, diag = extrapolate_gradient(sols)
        xis.append(xi)
        errs.append(err)
        lam_curves.append(diag)
        solutions.append(sols)
    eff = effective_matrix(medium, xis, error_estimates=errs, disc=disc)
    diagnostics = {
        "lambdas": sorted(float(l) for l in lambdas)[::-1],
        "lam_u2": [c["lam_u2"] for c in lam_curves],
        "monotone": [c["monotone"] for c in lam_curves],
        "gradient_error": errs,
        "energy": [[{"lam": s.lam, "lhs": s.energy_lhs, "rhs": s.energy_rhs,
                     "ok": s.energy_ok} for s in sols] for sols in solutions],
        "delta_history": [[list(map(float, h)) for h in sols[-1].delta_history]
                          for sols in solutions],
        "residuals": [[s.residual_norm for s in sols] for sols in solutions],
        "min_a_eigenvalue": disc.min_a_eig,
    }
    return eff, diagnostics, solutions
