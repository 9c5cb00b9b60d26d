"""Command-line entry point.

Subcommands bind media construction, corrector solves, Monte Carlo
estimation, ergodic averaging, and report emission. Every run is
reproducible from its config plus master seed; reports embed the resolved
config. Exit codes: 0 success / comparison pass, 1 comparison fail,
2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback

import numpy as np

from . import jsonio, kernels
from .config import ConfigError, load_config, require, resolved
from .corrector import EffectiveDiffusivity, SolverError, corrector_diffusivity
from .medium import ExtentError, build_medium, save_medium
from .montecarlo import (EnsembleSpec, dispersion_trend, ergodic_average,
                         gaussianity_diagnostics, mc_diffusivity,
                         pi_expectation, rescaled_ensemble)

EXIT_OK = 0
EXIT_COMPARE_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _out_dir(cfg, args):
    out = args.out or cfg.get("output", {}).get("directory") or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _medium_from(cfg, seed_offset=0):
    sec = dict(require(cfg, "medium"))
    sec.setdefault("seed", cfg["seed"] + seed_offset)
    try:
        return build_medium(sec)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad medium section: {exc}") from exc


def cmd_medium_sample(cfg, args) -> int:
    sec = require(cfg, "medium")
    if sec.get("kind") != "chessboard":
        raise ConfigError("medium-sample needs medium.kind == 'chessboard'")
    medium = _medium_from(cfg)
    out = _out_dir(cfg, args)
    path = os.path.join(out, "medium.json")
    save_medium(medium, path)
    colors = medium.randomness
    summary = {
        "schema": "homlab/medium-summary/1",
        "config": resolved(cfg),
        "file": path,
        "n_cells": {k: len(colors[k]) for k in ("colors_t", "colors_x1", "colors_x2")},
        "color_mean": {k: float(np.mean(colors[k]))
                       for k in ("colors_t", "colors_x1", "colors_x2")},
        "shift": list(colors["shift"]),
    }
    jsonio.dump(summary, os.path.join(out, "medium_summary.json"))
    print(f"sampled chessboard medium -> {path}")
    for k, v in summary["color_mean"].items():
        print(f"  {k}: mean {v:.6f} over {summary['n_cells'][k]} cells")
    return EXIT_OK


def _save_solutions(solutions, out):
    for sols in solutions:
        for sol in sols:
            base = os.path.join(
                out, f"corrector_i{sol.coordinate + 1}_lam{sol.lam:.0e}")
            cell = sol.u.cell
            header = {
                "schema": "homlab/corrector-solution/1",
                "coordinate": sol.coordinate, "lambda": sol.lam, "delta": sol.delta,
                "shape": list(cell.shape), "periods": list(cell.periods),
                "residual_norm": sol.residual_norm, "iterations": sol.iterations,
                "l2_norm": sol.l2_norm, "h1_norm": sol.h1_norm,
                "values_csv": os.path.basename(base) + ".csv",
            }
            jsonio.dump(header, base + ".json")
            d = cell.dim
            with open(base + ".csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["node"] + ["u"] + [f"g{j+1}" for j in range(d)])
                u = sol.u.values.ravel()
                g = sol.grad_sigma_u.values.reshape(-1, d)
                for n in range(u.shape[0]):
                    writer.writerow([n, repr(float(u[n]))]
                                    + [repr(float(v)) for v in g[n]])


def cmd_solve_corrector(cfg, args) -> int:
    medium = _medium_from(cfg)
    sec = require(cfg, "corrector")
    out = _out_dir(cfg, args)
    eff, diagnostics, solutions = corrector_diffusivity(
        medium, tuple(sec["shape"]),
        lambdas=sec.get("lambdas", (1e-2, 1e-3, 1e-4)),
        rtol=sec.get("rtol", 1e-10), max_iter=sec.get("max_iter", 20000),
        delta0=sec.get("delta0", 0.1))
    doc = eff.to_dict()
    doc["config"] = resolved(cfg)
    doc["diagnostics"] = diagnostics
    jsonio.dump(doc, os.path.join(out, "diffusivity_corrector.json"))
    _save_solutions(solutions, out)
    print(f"corrector A ({medium.kind}):")
    for row in eff.A:
        print("   " + "  ".join(f"{v: .8f}" for v in row))
    print(f"  gradient extrapolation error ~ {max(diagnostics['gradient_error']):.2e}")
    return EXIT_OK


def _ensemble_spec(cfg, epsilon=None):
    sec = require(cfg, "sde")
    try:
        return EnsembleSpec(
            n_paths=int(sec["n_paths"]),
            epsilon=float(epsilon if epsilon is not None else sec["epsilon"]),
            horizon=float(sec.get("horizon", 1.0)),
            dt=float(sec["dt"]),
            observation_times=tuple(sec.get("observation_times", (0.5, 1.0))),
            n_media=int(sec.get("n_media", 1)),
            master_seed=cfg["seed"], workers=cfg["workers"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad sde section: {exc}") from exc


def cmd_estimate(cfg, args) -> int:
    out = _out_dir(cfg, args)
    sde_sec = require(cfg, "sde")
    n_media = int(sde_sec.get("n_media", 1))
    if n_media > 1:
        family = _make_family(cfg)
    else:
        family = _medium_from(cfg)

    spec = _ensemble_spec(cfg)
    eff = mc_diffusivity(family, spec)
    doc = eff.to_dict()
    doc["config"] = resolved(cfg)
    jsonio.dump(doc, os.path.join(out, "diffusivity_mc.json"))
    print(f"MC A_hat (epsilon={spec.epsilon}):")
    for row, ci in zip(eff.A, eff.ci):
        print("   " + "  ".join(f"{v: .6f}(±{c:.6f})" for v, c in zip(row, ci)))

    if len(spec.observation_times) >= 2:
        Z = rescaled_ensemble(family, spec)
        ref = _reference_A(out)
        diag = gaussianity_diagnostics(
            Z[:, :2, :], spec.observation_times[:2],
            reference_A=ref.A if ref else None,
            reference_ci=ref.ci if ref else None)
        ddoc = diag.to_dict()
        ddoc["config"] = resolved(cfg)
        jsonio.dump(ddoc, os.path.join(out, "diagnostics.json"))
        print(f"  gaussianity: kurtosis={['%.3f' % k for k in diag.kurtosis]} "
              f"flags: kurt={diag.kurtosis_flag} cross={diag.cross_cov_flag} "
              f"incr={diag.increment_flag}")

    eps_list = sde_sec.get("epsilons")
    if eps_list:
        if n_media > 1:
            trend = dispersion_trend(family, spec, eps_list)
        else:
            rows = []
            for eps in sorted(map(float, eps_list))[::-1]:
                sub = _ensemble_spec(cfg, epsilon=eps)
                e = mc_diffusivity(family, sub)
                rows.append({"epsilon": eps, "A": e.A.tolist(), "ci": e.ci.tolist()})
            trend = {"schema": "homlab/dispersion/1", "rows": rows}
        trend["config"] = resolved(cfg)
        jsonio.dump(trend, os.path.join(out, "epsilon_sweep.json"))
        if "decreasing" in trend:
            print(f"  inter-medium dispersion decreasing: {trend['decreasing']}")
    return EXIT_OK


def _make_family(cfg):
    base = dict(require(cfg, "medium"))

    def family(m):
        sec = dict(base)
        sec["seed"] = cfg["seed"] + 1000 * (m + 1)
        return build_medium(sec)

    return family


def _reference_A(out):
    path = os.path.join(out, "diffusivity_corrector.json")
    if os.path.exists(path):
        return EffectiveDiffusivity.from_dict(jsonio.load(path))
    return None


def cmd_ergodic(cfg, args) -> int:
    out = _out_dir(cfg, args)
    medium = _medium_from(cfg)
    sec = require(cfg, "ergodic")
    try:
        t_grid = [float(t) for t in sec["t_grid"]]
        spec = EnsembleSpec(n_paths=int(sec["n_paths"]), epsilon=1.0,
                            horizon=max(t_grid), dt=float(sec["dt"]),
                            observation_times=(max(t_grid),),
                            master_seed=cfg["seed"], workers=cfg["workers"])
        observable = sec.get("observable", "a11")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad ergodic section: {exc}") from exc
    curve = ergodic_average(medium, observable, t_grid, spec)
    curve["config"] = resolved(cfg)
    jsonio.dump(curve, os.path.join(out, "ergodic.json"))
    with open(os.path.join(out, "ergodic.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "error", "ci"])
        for t, e, c in zip(curve["t_grid"], curve["error"], curve["ci"]):
            writer.writerow([repr(t), repr(e), repr(c)])
    print(f"ergodic error curve ({observable}): pi(f)={curve['pi_f']:.6f} "
          f"slope={curve['slope']:.3f} final={curve['error'][-1]:.3e}")
    return EXIT_OK


def cmd_compare(cfg, args) -> int:
    a = EffectiveDiffusivity.from_dict(jsonio.load(args.corrector_file))
    b = EffectiveDiffusivity.from_dict(jsonio.load(args.mc_file))
    if a.A.shape != b.A.shape:
        raise ConfigError("matrices have different dimensions")
    tol = args.tolerance
    if tol is None:
        tol = cfg.get("compare", {}).get("tolerance", 0.1) if cfg else 0.1
    denom = np.linalg.norm(a.A)
    err = float(np.linalg.norm(a.A - b.A) / denom) if denom > 0 \
        else float(np.linalg.norm(b.A))
    passed = err <= tol
    doc = {"schema": "homlab/compare/1",
           "corrector_file": os.path.abspath(args.corrector_file),
           "mc_file": os.path.abspath(args.mc_file),
           "A_corrector": a.A.tolist(), "A_mc": b.A.tolist(),
           "relative_frobenius_error": err, "tolerance": tol, "pass": passed}
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    jsonio.dump(doc, os.path.join(out, "compare.json"))
    print(f"relative Frobenius error {err:.4%} vs tolerance {tol:.4%}: "
          f"{'pass' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_COMPARE_FAIL


def cmd_report(cfg, args) -> int:
    """Full demo pipeline: corrector, MC sweep, ergodic curve, diagnostics."""
    out = _out_dir(cfg, args)
    rc = cmd_solve_corrector(cfg, args)
    if rc:
        return rc
    rc = cmd_estimate(cfg, args)
    if rc:
        return rc
    rc = cmd_ergodic(cfg, args)
    if rc:
        return rc
    candidates = {
        "corrector": "diffusivity_corrector.json",
        "mc": "diffusivity_mc.json",
        "diagnostics": "diagnostics.json",
        "epsilon_sweep": "epsilon_sweep.json",
        "ergodic": "ergodic.json",
    }
    manifest = {
        "schema": "homlab/report/1",
        "config": resolved(cfg),
        "backend": kernels.BACKEND,
        "files": {k: v for k, v in candidates.items()
                  if os.path.exists(os.path.join(out, v))},
    }
    jsonio.dump(manifest, os.path.join(out, "manifest.json"))
    print(f"report written to {out}/manifest.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homlab",
        description="Diffusions in degenerate space-time media: correctors, "
                    "effective diffusivity, and Monte Carlo cross-validation.")
    parser.add_argument("--config", help="config JSON path or preset name")
    parser.add_argument("--out", help="output directory (default from config)")
    parser.add_argument("--workers", type=int, help="parallel workers")
    parser.add_argument("--seed", type=int, help="master seed override")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("medium-sample", "solve-corrector", "estimate", "ergodic", "report"):
        sub.add_parser(name)
    cmp_p = sub.add_parser("compare")
    cmp_p.add_argument("corrector_file")
    cmp_p.add_argument("mc_file")
    cmp_p.add_argument("--tolerance", type=float, default=None)
    args = parser.parse_args(argv)

    handlers = {
        "medium-sample": cmd_medium_sample,
        "solve-corrector": cmd_solve_corrector,
        "estimate": cmd_estimate,
        "ergodic": cmd_ergodic,
        "compare": cmd_compare,
        "report": cmd_report,
    }
    try:
        if args.command == "compare":
            cfg = (load_config(args.config, seed=args.seed, workers=args.workers)
                   if args.config else None)
        else:
            if not args.config:
                raise ConfigError("--config is required for this command")
            cfg = load_config(args.config, seed=args.seed, workers=args.workers)
        return handlers[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ExtentError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:   # stay honest about unexpected failures
        traceback.print_exc()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
