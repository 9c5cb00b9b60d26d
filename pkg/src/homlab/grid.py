"""Periodic space-time cell grids and weighted discrete calculus.

Functions live on a uniform tensor grid over one (t, x) cell with wrap-around
indexing. All inner products carry the invariant weight exp(-2V), normalized
to unit mean, so discrete means and norms match their continuum counterparts.

Centered differences are used throughout. They are skew-adjoint under the
weighted inner product (the weight is time-independent, and shifts telescope
over the periodic grid), which gives the two structural identities the solver
relies on: the stream term contributes nothing to the quadratic form, and the
time derivative is exactly antisymmetric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Cell:
    """Uniform periodic grid over one cell: axis 0 is time, then space."""

    periods: tuple    # (T, L_1, ..., L_d)
    shape: tuple      # (N_t, N_1, ..., N_d)

    def __post_init__(self):
        if len(self.periods) != len(self.shape):
            raise ValueError("periods and shape must have equal length")
        if any(n < 1 for n in self.shape):
            raise ValueError("grid shape entries must be positive")

    @property
    def dim(self) -> int:
        return len(self.shape) - 1

    @property
    def spacing(self) -> tuple:
        return tuple(P / N for P, N in zip(self.periods, self.shape))

    def axes(self):
        return [np.arange(N) * h for N, h in zip(self.shape, self.spacing)]

    def nodes(self):
        """Flattened node coordinates: t (n,), x (n, d)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        t = grids[0].ravel()
        x = np.column_stack([g.ravel() for g in grids[1:]])
        return t, x

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class GridFunction:
    """Scalar or component-valued function on a periodic cell grid.

    ``values`` has the cell shape, plus trailing component axes for vector
    fields. Indexing wraps: the grid covers [0, P) per axis.
    """

    cell: Cell
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[: len(self.cell.shape)] != self.cell.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not start with cell shape "
                f"{self.cell.shape}")

    @classmethod
    def zeros(cls, cell: Cell, components: Sequence[int] = ()) -> "GridFunction":
        return cls(cell, np.zeros(cell.shape + tuple(components)))

    @classmethod
    def from_callable(cls, cell: Cell, f) -> "GridFunction":
        t, x = cell.nodes()
        vals = np.asarray(f(t, x), dtype=np.float64)
        comp = vals.shape[1:]
        return cls(cell, vals.reshape(cell.shape + comp))

    def copy(self) -> "GridFunction":
        return GridFunction(self.cell, self.values.copy())


def diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order centered difference with periodic wrap.

    Axes of length 1 are constant directions; their derivative is zero, which
    keeps time-independent problems exact on a single time slab.
    """
    if values.shape[axis] == 1:
        return np.zeros_like(values)
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)


class CellDiscretization:
    """Coefficients of one medium sampled on a cell grid, plus weighted calculus."""

    def __init__(self, medium, shape):
        field = medium.field
        if field.periods is None:
            raise ValueError(
                "cell problems need a periodic medium; periodize random media first")
        shape = tuple(int(n) for n in shape)
        if len(shape) == field.dim:      # convenience: no time axis given
            shape = (1,) + shape
        if len(shape) != field.dim + 1:
            raise ValueError(f"grid shape must have {field.dim + 1} axes")
        self.medium = medium
        self.cell = Cell(periods=tuple(float(p) for p in field.periods), shape=shape)
        self.dim = field.dim
        t, x = self.cell.nodes()
        gs = self.cell.shape
        d = self.dim
        self.a = field.a(t, x).reshape(gs + (d, d))
        self.H = field.H(t, x).reshape(gs + (d, d))
        self.a_tilde = field.a_tilde(x).reshape(gs + (d, d))
        self.sigma = field.sigma(t, x).reshape(gs + (d, d))
        w = field.weight(x).reshape(gs)
        self.weight = w / w.mean()
        self.min_a_eig = float(np.linalg.eigvalsh(self.a.reshape(-1, d, d)).min())

    # -- weighted quadrature -------------------------------------------------

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.mean(self.weight * u * v))

    def pi_mean(self, u: np.ndarray) -> float:
        return float(np.mean(self.weight * u))

    def l2(self, u: np.ndarray) -> float:
        return np.sqrt(max(self.inner(u, u), 0.0))

    # -- discrete calculus ----------------------------------------------------

    def dt(self, u: np.ndarray) -> np.ndarray:
        return diff(u, 0, self.cell.spacing[0])

    def grad(self, u: np.ndarray) -> np.ndarray:
        """Spatial gradient, components stacked on a trailing axis."""
        hs = self.cell.spacing
        return np.stack([diff(u, 1 + j, hs[1 + j]) for j in range(self.dim)], axis=-1)

    def div_weighted(self, flux: np.ndarray) -> np.ndarray:
        """(1/w) sum_i D_i(w flux_i) for a trailing-axis vector field."""
        hs = self.cell.spacing
        acc = np.zeros(self.cell.shape)
        for i in range(self.dim):
            acc += diff(self.weight * flux[..., i], 1 + i, hs[1 + i])
        return acc / self.weight

    def grad_sigma(self, u: np.ndarray) -> np.ndarray:
        """sigma^T grad u, the gradient along the noise directions."""
        g = self.grad(u)
        return np.einsum("...ji,...j->...i", self.sigma, g)

    def h1_tilde(self, u: np.ndarray) -> float:
        """Control seminorm: sqrt(1/2 <a_tilde grad u, grad u>_pi)."""
        g = self.grad(u)
        q = np.einsum("...ij,...i,...j->...", self.a_tilde, g, g)
        return np.sqrt(max(0.5 * float(np.mean(self.weight * q)), 0.0))

    def energy_a(self, u: np.ndarray, v: np.ndarray) -> float:
        """1/2 <[a+H] grad u, grad v>_pi (the non-symmetric form's flux part)."""
        gu, gv = self.grad(u), self.grad(v)
        q = np.einsum("...ij,...j,...i->...", self.a + self.H, gu, gv)
        return 0.5 * float(np.mean(self.weight * q))
