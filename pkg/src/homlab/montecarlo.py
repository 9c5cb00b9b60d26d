"""Ensemble statistics: Monte Carlo effective diffusivity, ergodic averaging,
and Brownian-limit diagnostics.

Estimators use the known zero mean of the rescaled displacement (paths start
at the origin of a stationarily shifted medium), batch-means confidence
intervals over a fixed path order, and a counter-based stream throughout, so
every report is bitwise reproducible for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from . import kernels
from .corrector import EffectiveDiffusivity
from .medium import OBSERVABLES, MediumInstance, cell_average
from .sde import ensemble_positions, ergodic_averages

__all__ = [
    "EnsembleSpec", "DiagnosticsReport", "mc_diffusivity", "rescaled_ensemble",
    "ergodic_average", "gaussianity_diagnostics", "dispersion_trend",
]

Z95 = 1.959963984540054          # two-sided 95% normal quantile
N_BATCHES = 20


@dataclass(frozen=True)
class EnsembleSpec:
    """Size and scale of one annealed ensemble."""

    n_paths: int
    epsilon: float
    horizon: float                      # macroscopic T
    dt: float                           # microscopic step
    observation_times: tuple = (0.5, 1.0)
    n_media: int = 1
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1 or self.n_media < 1:
            raise ValueError("need at least one path and one medium")
        ts = np.asarray(self.observation_times, dtype=np.float64)
        if ts.size == 0 or ts.min() <= 0 or ts.max() > self.horizon + 1e-12:
            raise ValueError("observation times must lie in (0, horizon]")
        if self.epsilon <= 0 or self.dt <= 0:
            raise ValueError("epsilon and dt must be positive")

    def require_statistics(self):
        if self.n_paths * self.n_media < 100:
            raise ValueError("statistical output needs n_paths * n_media >= 100")

    def observation_steps(self):
        steps = []
        for t in self.observation_times:
            micro = t / self.epsilon ** 2
            n = int(round(micro / self.dt))
            if n < 1 or abs(n * self.dt - micro) > 1e-7 * max(1.0, micro):
                raise ValueError(
                    f"observation time {t} is not resolved by dt={self.dt} "
                    f"at epsilon={self.epsilon}")
            steps.append(n)
        if sorted(set(steps)) != steps:
            raise ValueError("observation times must be strictly increasing")
        return steps


def _media(medium_family, spec: EnsembleSpec):
    if isinstance(medium_family, MediumInstance):
        if spec.n_media != 1:
            raise ValueError("n_media > 1 needs a medium factory")
        return [medium_family]
    return [medium_family(m) for m in range(spec.n_media)]


def rescaled_ensemble(medium_family, spec: EnsembleSpec) -> np.ndarray:
    """Rescaled displacements Z = eps * X_{t/eps^2}: (n_media*n_paths, n_obs, d)."""
    steps = spec.observation_steps()
    media = _media(medium_family, spec)
    blocks = []
    for m, med in enumerate(media):
        pos = ensemble_positions(med, spec.master_seed, spec.n_paths, spec.dt,
                                 steps, path_offset=m * spec.n_paths,
                                 workers=spec.workers)
        blocks.append(pos * spec.epsilon)
    return np.concatenate(blocks, axis=0)


def _batch_cov(Z: np.ndarray, times, n_batches=N_BATCHES):
    """Zero-mean covariance of Z/t averaged over observation times, with
    batch-means CIs. Z: (N, n_obs, d)."""
    N, n_obs, d = Z.shape
    scaled = np.einsum("nki,nkj->nkij", Z, Z) / np.asarray(times)[None, :, None, None]
    per_path = scaled.mean(axis=1)                   # (N, d, d)
    A_hat = per_path.mean(axis=0)
    bounds = np.linspace(0, N, min(n_batches, N) + 1).astype(int)
    batch = np.array([per_path[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    nb = batch.shape[0]
    ci = Z95 * batch.std(axis=0, ddof=1) / np.sqrt(nb) if nb > 1 else np.full((d, d), np.inf)
    return A_hat, ci


def mc_diffusivity(medium_family, spec: EnsembleSpec) -> EffectiveDiffusivity:
    """Annealed Monte Carlo effective diffusivity.

    A_hat(t) = Cov(eps X_{t/eps^2}) / t averaged over the observation times,
    zero-mean estimator, batch-means 95% CIs over the fixed path order.
    """
    spec.require_statistics()
    Z = rescaled_ensemble(medium_family, spec)
    A_hat, ci = _batch_cov(Z, spec.observation_times)
    A_sym = 0.5 * (A_hat + A_hat.T)
    per_medium = None
    if spec.n_media > 1:
        split = Z.reshape(spec.n_media, spec.n_paths, *Z.shape[1:])
        per_medium, per_se = [], []
        for s in split:
            A_m, ci_m = _batch_cov(s, spec.observation_times)
            per_medium.append(0.5 * (A_m + A_m.T))
            per_se.append(ci_m / Z95)
    meta = {
        "epsilon": spec.epsilon, "dt": spec.dt, "n_paths": spec.n_paths,
        "n_media": spec.n_media, "observation_times": list(spec.observation_times),
        "master_seed": spec.master_seed, "backend": kernels.BACKEND,
    }
    if per_medium is not None:
        # quenched spread of A_hat across media, debiased entrywise by the
        # within-medium sampling variance (which does not shrink with epsilon)
        stack = np.array(per_medium)
        var_between = stack.var(axis=0, ddof=1)
        var_within = np.mean(np.array(per_se) ** 2, axis=0)
        disp = np.sqrt(np.sum(np.maximum(var_between - var_within, 0.0)))
        meta["per_medium_A"] = [m.tolist() for m in per_medium]
        meta["inter_medium_dispersion"] = float(disp)
    return EffectiveDiffusivity(A=A_sym, method="monte_carlo", ci=ci, meta=meta)


def dispersion_trend(medium_factory: Callable, spec: EnsembleSpec,
                     epsilons: Sequence[float]) -> dict:
    """Inter-medium dispersion of A_hat across a decreasing epsilon schedule.

    The theory gives convergence in probability over the medium without a
    rate; the emitted flag is a monotone-trend check only.
    """
    if spec.n_media < 2:
        raise ValueError("dispersion needs n_media >= 2")
    eps_sorted = sorted(float(e) for e in epsilons)[::-1]
    rows = []
    for eps in eps_sorted:
        sub = EnsembleSpec(n_paths=spec.n_paths, epsilon=eps, horizon=spec.horizon,
                           dt=spec.dt, observation_times=spec.observation_times,
                           n_media=spec.n_media, master_seed=spec.master_seed,
                           workers=spec.workers)
        eff = mc_diffusivity(medium_factory, sub)
        rows.append({"epsilon": eps, "A": eff.A.tolist(),
                     "dispersion": eff.meta["inter_medium_dispersion"],
                     "ci": eff.ci.tolist()})
    disp = [r["dispersion"] for r in rows]
    return {"schema": "homlab/dispersion/1", "rows": rows,
            "decreasing": all(b <= a * (1 + 1e-12) for a, b in zip(disp, disp[1:]))}


# ---------------------------------------------------------------------------
# ergodic averaging
# ---------------------------------------------------------------------------

def pi_expectation(medium_family, f, n_media: int = 1, resolution: int = 128) -> float:
    """E_pi f: cell quadrature for periodic media, spatial average over sampled
    realizations for finite random media."""
    fn = OBSERVABLES[f] if isinstance(f, str) else f
    media = ([medium_family] if isinstance(medium_family, MediumInstance)
             else [medium_family(m) for m in range(n_media)])
    vals = []
    for med in media:
        if med.base_field.periods is not None:
            vals.append(cell_average(med, fn, resolution=resolution))
        else:
            # stay two cells inside the sampled box (origin shift + bump reach)
            ext = np.asarray(med.params["extent"], dtype=np.float64)
            axes = [np.linspace(-e / 2 + 2.0, e / 2 - 2.0, resolution) for e in ext]
            grids = np.meshgrid(*axes, indexing="ij")
            t = grids[0].ravel()
            x = np.column_stack([g.ravel() for g in grids[1:]])
            w = med.field.weight(x)
            vals.append(float(np.sum(w * fn(med.field, t, x)) / np.sum(w)))
    return float(np.mean(vals))


def ergodic_average(medium: MediumInstance, f, t_grid: Sequence[float],
                    spec: EnsembleSpec, pi_f: Optional[float] = None) -> dict:
    """Mean absolute deviation of running time averages from the invariant mean.

    Returns the error curve over ``t_grid`` with CIs, the fitted log-log decay
    slope, and the target value pi(f).
    """
    spec.require_statistics()
    t_grid = sorted(float(t) for t in t_grid)
    steps = [int(round(t / spec.dt)) for t in t_grid]
    if any(abs(n * spec.dt - t) > 1e-9 * max(t, 1.0) for n, t in zip(steps, t_grid)):
        raise ValueError("t_grid must be multiples of dt")
    if pi_f is None:
        pi_f = pi_expectation(medium, f)
    avgs = ergodic_averages(medium, f, spec.master_seed, spec.n_paths, spec.dt,
                            steps, workers=spec.workers)
    dev = np.abs(avgs - pi_f)
    err = dev.mean(axis=0)
    ci = Z95 * dev.std(axis=0, ddof=1) / np.sqrt(spec.n_paths)
    pos = err > 0
    slope = float(np.polyfit(np.log(t_grid), np.log(np.maximum(err, 1e-300)), 1)[0]) \
        if pos.sum() >= 2 else float("nan")
    return {
        "schema": "homlab/ergodic/1",
        "observable": f if isinstance(f, str) else getattr(f, "__name__", "custom"),
        "t_grid": list(t_grid), "error": err.tolist(), "ci": ci.tolist(),
        "pi_f": pi_f, "slope": slope,
        "n_paths": spec.n_paths, "dt": spec.dt, "master_seed": spec.master_seed,
        "decreasing": bool(err[-1] < err[0]),
        "backend": kernels.BACKEND,
    }


# ---------------------------------------------------------------------------
# Brownian-limit diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    """Gaussianity signatures of a rescaled ensemble at two observation times.

    Thresholds: excess kurtosis 0.2 (about four standard errors at 1e4
    paths), increment correlation 5 standard errors, covariance agreement
    within the combined 95% CI.
    """

    times: tuple
    covariances: dict
    cov_ci: dict
    kurtosis: list
    kurtosis_flag: bool
    cross_cov: np.ndarray
    cross_cov_ci: np.ndarray
    cross_cov_flag: bool
    increment_corr: np.ndarray
    increment_flag: bool
    qq: dict
    n_paths: int
    reference_A: Optional[np.ndarray] = None
    kurtosis_threshold: float = 0.2
    meta: dict = dc_field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return self.kurtosis_flag and self.cross_cov_flag and self.increment_flag

    def to_dict(self) -> dict:
        return {
            "schema": "homlab/diagnostics/1",
            "times": list(self.times),
            "covariances": {k: v.tolist() for k, v in self.covariances.items()},
            "cov_ci": {k: v.tolist() for k, v in self.cov_ci.items()},
            "kurtosis": self.kurtosis,
            "kurtosis_threshold": self.kurtosis_threshold,
            "kurtosis_flag": self.kurtosis_flag,
            "cross_cov": self.cross_cov.tolist(),
            "cross_cov_ci": self.cross_cov_ci.tolist(),
            "cross_cov_flag": self.cross_cov_flag,
            "increment_corr": self.increment_corr.tolist(),
            "increment_flag": self.increment_flag,
            "qq": self.qq,
            "n_paths": self.n_paths,
            "reference_A": None if self.reference_A is None else self.reference_A.tolist(),
            "all_pass": self.all_pass,
            "meta": self.meta,
        }


def gaussianity_diagnostics(Z: np.ndarray, times: Sequence[float],
                            reference_A: Optional[np.ndarray] = None,
                            reference_ci: Optional[np.ndarray] = None,
                            kurtosis_threshold: float = 0.2) -> DiagnosticsReport:
    """Check the Brownian-limit signatures of a rescaled ensemble.

    Z: (N, 2, d) displacements at two macroscopic times s < t. Checks
    per-component excess kurtosis at the final time, cross-time covariance
    Cov(Z_s, Z_t) against min(s,t) * A, and decorrelation of the increment
    Z_t - Z_s from Z_s.
    """
    if Z.ndim != 3 or Z.shape[1] != 2:
        raise ValueError("Z must be (N, 2, d) at two observation times")
    N, _, d = Z.shape
    s, t = float(times[0]), float(times[1])
    if not 0 < s < t:
        raise ValueError("need 0 < s < t")
    Zs, Zt = Z[:, 0, :], Z[:, 1, :]

    covs, cis = {}, {}
    for key, val, tt in (("s", Zs, s), ("t", Zt, t)):
        A_hat, ci = _batch_cov(val[:, None, :], [tt])
        covs[key] = A_hat * tt    # raw covariance at this time
        cis[key] = ci * tt

    m2 = (Zt ** 2).mean(axis=0)
    m4 = (Zt ** 4).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kurt = np.where(m2 > 0, m4 / np.maximum(m2 ** 2, 1e-300) - 3.0, np.inf)
    kurt_flag = bool(np.all(np.isfinite(kurt)) and np.all(np.abs(kurt) <= kurtosis_threshold))

    cross = np.einsum("ni,nj->ij", Zs, Zt) / N
    per_path = np.einsum("ni,nj->nij", Zs, Zt)
    bounds = np.linspace(0, N, min(N_BATCHES, N) + 1).astype(int)
    batch = np.array([per_path[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    cross_ci = Z95 * batch.std(axis=0, ddof=1) / np.sqrt(batch.shape[0])
    if reference_A is not None:
        target = s * np.asarray(reference_A)
        tol = cross_ci + (0.0 if reference_ci is None else s * np.asarray(reference_ci))
        cross_flag = bool(np.all(np.abs(cross - target) <= tol))
    else:
        cross_flag = True

    inc = Zt - Zs
    denom = Zs.std(axis=0, ddof=0)[:, None] * inc.std(axis=0, ddof=0)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, np.einsum("ni,nj->ij", Zs, inc) / N / denom, 0.0)
    inc_thresh = 5.0 / np.sqrt(N)
    inc_flag = bool(np.all(np.abs(corr) <= inc_thresh))

    # standardized sample quantiles of the final-time components, for QQ panels
    probs = np.linspace(0.01, 0.99, 99)
    std = np.sqrt(np.maximum(m2, 1e-300))
    qq = {
        "probs": probs.tolist(),
        "normal": stats.norm.ppf(probs).tolist(),
        "sample": [np.quantile(Zt[:, i] / std[i], probs).tolist() for i in range(d)],
    }
    return DiagnosticsReport(
        times=(s, t), covariances=covs, cov_ci=cis,
        kurtosis=kurt.tolist(), kurtosis_flag=kurt_flag,
        cross_cov=cross, cross_cov_ci=cross_ci, cross_cov_flag=cross_flag,
        increment_corr=corr, increment_flag=inc_flag, qq=qq, n_paths=N,
        reference_A=None if reference_A is None else np.asarray(reference_A),
        kurtosis_threshold=kurtosis_threshold,
        meta={"increment_threshold": inc_thresh, "backend": kernels.BACKEND},
    )
