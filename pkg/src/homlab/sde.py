"""Path simulation for diffusions in random media.

Weak order-1 Euler-Maruyama stepping with a counter-based Gaussian stream
keyed by (seed, path, step): trajectories are bitwise reproducible for any
chunking or worker count. The module covers the plain diffusion, the
time-independent control diffusion, the time-augmented diffusion whose first
coordinate carries its own noisy clock, diffusive rescaling, and observation
of the medium along a path (the environment seen from the particle).

Stationary starts are implemented by shifting the medium origin per path:
a path started at x = 0 in the shifted medium is the same as a path started
at the shift point, and the shift is drawn from the invariant weight.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .medium import OBSERVABLES, MediumInstance

__all__ = [
    "SdeConfig", "Trajectory", "simulate", "simulate_control", "simulate_delta",
    "rescale", "observe_environment", "pi_shifts", "ensemble_positions",
    "ergodic_averages", "write_trajectory_csv",
]


@dataclass(frozen=True)
class SdeConfig:
    """Stepping parameters for one path or one ensemble."""

    dt: float
    horizon: float
    epsilon: float = 1.0
    scheme: str = "euler_maruyama"
    seed: int = 0
    path_index: int = 0

    def __post_init__(self):
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.dt > 0 and self.horizon > 0 and self.dt <= self.horizon):
            raise ValueError("need 0 < dt <= horizon")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def n_steps(self) -> int:
        n = int(round(self.horizon / self.dt))
        if abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError("horizon must be an integer number of steps")
        return n

    def check_stability(self, bound: float):
        if self.dt * bound ** 2 > 0.1:
            warnings.warn(
                f"dt * K^2 = {self.dt * bound**2:.3g} > 0.1; the step size is "
                "coarse for this coefficient bound", stacklevel=3)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray           # (n+1, d) or (n+1, d+1) for the augmented process
    medium_id: str
    seed: int
    path_index: int
    kind: str = "diffusion"      # diffusion | control | augmented | rescaled

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.times.shape[0] != self.states.shape[0]:
            raise ValueError("times and states must align")


def _single_path(medium: MediumInstance, config: SdeConfig, start, control: bool,
                 delta: Optional[float]) -> Trajectory:
    config.check_stability(medium.base_field.bound)
    dim = medium.dim
    start = np.asarray(start, dtype=np.float64).reshape(1, dim)
    n = config.n_steps
    paths = np.array([config.path_index], dtype=np.uint64)
    shift_t = np.array([medium.origin_t])
    shift_x = medium.origin_x.reshape(1, dim)
    out = kernels.em_paths(medium.payload, config.seed, paths, start, shift_t,
                           shift_x, 0, config.dt, n, rec_stride=1,
                           control=control, delta=delta)
    times = np.arange(n + 1) * config.dt
    if delta is None:
        states = np.vstack([start, out[0]])
        kind = "control" if control else "diffusion"
    else:
        first = np.concatenate([[0.0], start[0]])
        states = np.vstack([first, out[0]])
        kind = "augmented"
    return Trajectory(times=times, states=states, medium_id=medium.medium_id,
                      seed=config.seed, path_index=config.path_index, kind=kind)


def simulate(medium: MediumInstance, config: SdeConfig, start=None) -> Trajectory:
    """One path of the diffusion driven by (b, sigma)."""
    if start is None:
        start = np.zeros(medium.dim)
    return _single_path(medium, config, start, control=False, delta=None)


def simulate_control(medium: MediumInstance, config: SdeConfig, start=None) -> Trajectory:
    """One path of the control diffusion (b_tilde, sigma_tilde)."""
    if start is None:
        start = np.zeros(medium.dim)
    return _single_path(medium, config, start, control=True, delta=None)


def simulate_delta(medium: MediumInstance, config: SdeConfig, delta: float,
                   start=None) -> Trajectory:
    """One path of the (d+1)-dimensional time-augmented diffusion.

    The first coordinate advances at unit drift with sqrt(delta) noise from an
    independent Brownian motion and feeds the coefficient clock; at delta = 0
    it equals n*dt exactly and the spatial coordinates reproduce simulate().
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if start is None:
        start = np.zeros(medium.dim)
    return _single_path(medium, config, start, control=False, delta=float(delta))


def rescale(traj: Trajectory, epsilon: float,
            macro_times: Optional[Sequence[float]] = None) -> Trajectory:
    """Diffusive rescaling t -> eps * X_{t / eps^2}.

    With ``macro_times`` the path is subsampled at those macroscopic times,
    which must land on recorded steps; the microscopic horizon must cover
    max(macro_times) / eps^2.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    times = traj.times * epsilon ** 2
    states = traj.states * epsilon
    if macro_times is not None:
        macro_times = np.asarray(macro_times, dtype=np.float64)
        if macro_times.max() > times[-1] + 1e-12:
            raise ValueError(
                f"horizon {traj.times[-1]:g} is insufficient for macroscopic time "
                f"{macro_times.max():g} at epsilon {epsilon:g}")
        idx = np.searchsorted(times, macro_times - 1e-12)
        if not np.allclose(times[idx], macro_times, atol=1e-9):
            raise ValueError("macro_times must land on recorded steps")
        times = times[idx]
        states = states[idx]
    return Trajectory(times=times, states=states, medium_id=traj.medium_id,
                      seed=traj.seed, path_index=traj.path_index, kind="rescaled")


def observe_environment(medium: MediumInstance, traj: Trajectory,
                        f: Union[str, Callable]) -> np.ndarray:
    """Evaluate an observable of the environment along the path.

    ``f`` is a name from ``medium.OBSERVABLES`` or a callable
    ``f(field, t, x) -> (n,)``; it sees the medium through the shift to the
    current path position, i.e. the environment process.
    """
    fn = OBSERVABLES[f] if isinstance(f, str) else f
    off = 1 if traj.kind == "augmented" else 0
    x = traj.states[:, off:off + medium.dim]
    t = traj.states[:, 0] if traj.kind == "augmented" else traj.times
    return np.asarray(fn(medium.field, t, x), dtype=np.float64)


# ---------------------------------------------------------------------------
# stationary initial shifts
# ---------------------------------------------------------------------------

def pi_shifts(medium: MediumInstance, seed: int, path_ids: np.ndarray,
              max_tries: int = 64):
    """Per-path medium shifts distributed as the invariant weight.

    Uniform over the cell when V = 0; otherwise rejection against
    exp(-2V)/max. Finite-extent random media return zero shifts (their own
    sampled randomness already carries the stationarity).
    """
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    P = path_ids.shape[0]
    dim = medium.dim
    periods = medium.base_field.periods
    if periods is None:
        return np.zeros(P), np.zeros((P, dim))
    periods = np.asarray(periods, dtype=np.float64)
    u = kernels.uniforms(seed, path_ids, 0, kernels.PURPOSE_INIT, dim + 2)
    shift_t = u[:, 0] * periods[0]
    shift_x = u[:, 1:dim + 1] * periods[1:]

    # grid max of the weight, inflated to stay a true envelope for smooth V
    probe = _grid_probe(periods[1:], n=257 if dim == 1 else 33)
    w_max = medium.base_field.weight(probe).max() * 1.001
    accept = medium.base_field.weight(shift_x) >= u[:, dim + 1] * w_max
    for attempt in range(1, max_tries):
        if accept.all():
            break
        redo = ~accept
        ids = path_ids[redo]
        u = kernels.uniforms(seed, ids, attempt, kernels.PURPOSE_INIT, dim + 2)
        shift_t[redo] = u[:, 0] * periods[0]
        shift_x[redo] = u[:, 1:dim + 1] * periods[1:]
        accept[redo] = medium.base_field.weight(shift_x[redo]) >= u[:, dim + 1] * w_max
    if not accept.all():
        raise RuntimeError("rejection sampling of the stationary start failed")
    return shift_t + medium.origin_t, shift_x + medium.origin_x


def _grid_probe(lengths, n=33):
    axes = [np.linspace(0.0, L, n, endpoint=False) for L in lengths]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in grids])


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def _chunks(total, n_chunks):
    bounds = np.linspace(0, total, n_chunks + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def ensemble_positions(medium: MediumInstance, seed: int, n_paths: int,
                       dt: float, obs_steps: Sequence[int],
                       stationary_start: bool = True,
                       path_offset: int = 0, workers: int = 1) -> np.ndarray:
    """Positions of an ensemble at selected global steps: (P, n_obs, d).

    All paths start at x = 0 (in per-path shifted media when
    ``stationary_start``). Records are independent of ``workers``.
    """
    obs_steps = sorted(int(s) for s in obs_steps)
    if obs_steps[0] <= 0:
        raise ValueError("observation steps must be positive")
    path_ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    if stationary_start:
        shift_t, shift_x = pi_shifts(medium, seed, path_ids)
    else:
        shift_t = np.full(n_paths, medium.origin_t)
        shift_x = np.tile(medium.origin_x, (n_paths, 1))
    out = np.empty((n_paths, len(obs_steps), medium.dim))

    def run(bounds):
        a, b = bounds
        state = np.zeros((b - a, medium.dim))
        step = 0
        for j, target in enumerate(obs_steps):
            seg = target - step
            rec = kernels.em_paths(medium.payload, seed, path_ids[a:b], state,
                                   shift_t[a:b], shift_x[a:b], step, dt, seg,
                                   rec_stride=seg)
            state = np.ascontiguousarray(rec[:, -1, :])
            out[a:b, j, :] = state
            step = target

    pieces = _chunks(n_paths, max(1, workers * 4)) if workers > 1 else [(0, n_paths)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, pieces))
    else:
        for piece in pieces:
            run(piece)
    return out


def ergodic_averages(medium: MediumInstance, f: Union[str, Callable], seed: int,
                     n_paths: int, dt: float, checkpoint_steps: Sequence[int],
                     chunk_steps: int = 20000, workers: int = 1,
                     path_offset: int = 0) -> np.ndarray:
    """Running time averages of f along the environment process.

    Returns (P, n_checkpoints) with entry [p, k] the average of f over
    [0, checkpoint_steps[k] * dt] along path p, f evaluated at every step by
    the left-endpoint rule. Paths start stationary.
    """
    fn = OBSERVABLES[f] if isinstance(f, str) else f
    checkpoints = sorted(int(s) for s in checkpoint_steps)
    n_steps = checkpoints[-1]
    path_ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    shift_t, shift_x = pi_shifts(medium, seed, path_ids)
    out = np.empty((n_paths, len(checkpoints)))
    base = medium.base_field

    def run(bounds):
        a, b = bounds
        state = np.zeros((b - a, medium.dim))
        # acc holds sum of f over steps 0..step inclusive
        acc = np.asarray(fn(base, shift_t[a:b].copy(), state + shift_x[a:b]),
                         dtype=np.float64).copy()
        step = 0
        next_cp = 0
        while step < n_steps:
            seg = min(chunk_steps, n_steps - step)
            rec = kernels.em_paths(medium.payload, seed, path_ids[a:b], state,
                                   shift_t[a:b], shift_x[a:b], step, dt, seg,
                                   rec_stride=1)
            t_flat = (np.arange(step + 1, step + seg + 1) * dt)[None, :] + shift_t[a:b, None]
            x_flat = rec + shift_x[a:b, None, :]
            vals = fn(base, t_flat.ravel(),
                      x_flat.reshape(-1, medium.dim)).reshape(b - a, seg)
            csum = np.cumsum(vals, axis=1)
            while next_cp < len(checkpoints) and checkpoints[next_cp] <= step + seg:
                k = checkpoints[next_cp]
                # average of f over left endpoints 0 .. k-1
                local = k - step - 2
                total = acc if local < 0 else acc + csum[:, local]
                out[a:b, next_cp] = total / k
                next_cp += 1
            acc += csum[:, seg - 1]
            state = np.ascontiguousarray(rec[:, -1, :])
            step += seg

    pieces = _chunks(n_paths, max(1, workers * 4)) if workers > 1 else [(0, n_paths)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, pieces))
    else:
        for piece in pieces:
            run(piece)
    return out


def write_trajectory_csv(trajectories, path):
    """Stream trajectories to CSV with columns path, step, t, x1..xd."""
    import csv
    import os

    trajectories = [trajectories] if isinstance(trajectories, Trajectory) else list(trajectories)
    dim = trajectories[0].states.shape[1]
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "t"] + [f"x{i+1}" for i in range(dim)])
        for traj in trajectories:
            for k, (t, row) in enumerate(zip(traj.times, traj.states)):
                writer.writerow([traj.path_index, k, repr(float(t))]
                                + [repr(float(v)) for v in row])
