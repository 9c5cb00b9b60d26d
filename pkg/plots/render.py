#!/usr/bin/env python3
"""Render static figures from homlab JSON/CSV outputs.

Offline companion to the simulation CLI: it reads only the documented report
schemas and produces matplotlib figures. Figure requests are JSON specs:

    {"schema": "homlab-figure/1", "kind": "ergodic_decay",
     "inputs": {"ergodic": "out/ergodic.json"}, "output": "figs/ergodic.png"}

Kinds: lambda_convergence, epsilon_convergence, ergodic_decay,
gaussianity_qq, report (2x2 panel driven by a run manifest).

    render.py --spec fig.json [--extract arrays.json]
    render.py --all out/manifest.json --outdir figs [--extract-dir figs]

``--extract`` writes the exact arrays placed on the axes, so pipelines can
verify the figure against its inputs; rendering never mutates inputs.
Exit codes: 0 rendered, 2 bad spec or input schema mismatch.
"""

import argparse
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGURE_SCHEMA = "homlab-figure/1"
KINDS = ("lambda_convergence", "epsilon_convergence", "ergodic_decay",
         "gaussianity_qq", "report")


class SpecError(ValueError):
    pass


def _load(path, expect_schema):
    if not os.path.exists(path):
        raise SpecError(f"input file missing: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    schema = doc.get("schema")
    if schema != expect_schema:
        raise SpecError(f"{path}: schema {schema!r}, expected {expect_schema!r}")
    return doc


def _need(inputs, key):
    if key not in inputs:
        raise SpecError(f"figure inputs need {key!r}")
    return inputs[key]


# ---------------------------------------------------------------------------
# panels: each draws on an axis and returns the plotted arrays
# ---------------------------------------------------------------------------

def panel_lambda(ax, inputs):
    doc = _load(_need(inputs, "corrector"), "homlab/diffusivity/1")
    diag = doc.get("diagnostics", {})
    lambdas = diag.get("lambdas", [])
    curves = diag.get("lam_u2", [])
    for i, seq in enumerate(curves):
        ax.loglog(lambdas, seq, "o-", label=f"coordinate {i + 1}")
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel(r"$\lambda\,|u_\lambda|_2^2$")
    ax.set_title("resolvent regularization vanishes")
    if curves:
        ax.legend(fontsize=8)
    ax.invert_xaxis()
    return {"lambdas": lambdas, "lam_u2": curves}


def panel_epsilon(ax, inputs):
    sweep = _load(_need(inputs, "sweep"), "homlab/dispersion/1")
    rows = sweep.get("rows", [])
    eps = [r["epsilon"] for r in rows]
    frob = [sum(sum(v * v for v in row) for row in r["A"]) ** 0.5 for r in rows]
    ax.plot(eps, frob, "s-", label=r"$\|\hat A(\varepsilon)\|_F$")
    extracted = {"epsilons": eps, "frobenius": frob}
    if "corrector" in inputs:
        ref = _load(inputs["corrector"], "homlab/diffusivity/1")
        ref_frob = sum(sum(v * v for v in row) for row in ref["A"]) ** 0.5
        ax.axhline(ref_frob, color="k", ls="--", label="corrector")
        extracted["reference"] = ref_frob
    disp = [r.get("dispersion") for r in rows if "dispersion" in r]
    if disp:
        ax.plot(eps[:len(disp)], disp, "^:", label="inter-medium dispersion")
        extracted["dispersion"] = disp
    ax.set_xlabel(r"$\varepsilon$")
    ax.set_ylabel("Frobenius scale")
    ax.set_title("Monte Carlo vs corrector")
    ax.legend(fontsize=8)
    return extracted


def panel_ergodic(ax, inputs):
    doc = _load(_need(inputs, "ergodic"), "homlab/ergodic/1")
    t, err, ci = doc["t_grid"], doc["error"], doc["ci"]
    if t and any(e > 0 for e in err):
        ax.errorbar(t, err, yerr=ci, fmt="o-", capsize=2)
        ax.set_xscale("log")
        ax.set_yscale("log")
        slope = doc.get("slope")
        if slope is not None and len(t) >= 2 and err[0] > 0:
            guide = [err[0] * (tt / t[0]) ** slope for tt in t]
            ax.plot(t, guide, "k--", lw=0.8, label=f"slope {slope:.2f}")
            ax.legend(fontsize=8)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$E_\pi\,|\bar f_t - \pi(f)|$")
    ax.set_title(f"ergodic averaging ({doc.get('observable', '?')})")
    return {"t_grid": t, "error": err, "ci": ci, "slope": doc.get("slope")}


def panel_qq(ax, inputs):
    doc = _load(_need(inputs, "diagnostics"), "homlab/diagnostics/1")
    qq = doc["qq"]
    normal = qq["normal"]
    for i, sample in enumerate(qq["sample"]):
        ax.plot(normal, sample, ".", ms=3, label=f"component {i + 1}")
    if normal:
        lo, hi = min(normal), max(normal)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("normal quantiles")
    ax.set_ylabel("sample quantiles")
    flags = "pass" if doc.get("all_pass") else "flagged"
    ax.set_title(f"rescaled displacement QQ ({flags})")
    ax.legend(fontsize=8)
    return {"normal": normal, "sample": qq["sample"],
            "kurtosis": doc.get("kurtosis")}


PANELS = {
    "lambda_convergence": panel_lambda,
    "epsilon_convergence": panel_epsilon,
    "ergodic_decay": panel_ergodic,
    "gaussianity_qq": panel_qq,
}


def build_figure(spec):
    """Render one figure spec; returns (figure, extracted arrays)."""
    if spec.get("schema") != FIGURE_SCHEMA:
        raise SpecError(f"figure spec schema must be {FIGURE_SCHEMA!r}")
    kind = spec.get("kind")
    if kind not in KINDS:
        raise SpecError(f"unknown figure kind {kind!r}; known: {', '.join(KINDS)}")
    inputs = spec.get("inputs")
    if not isinstance(inputs, dict):
        raise SpecError("figure spec needs an 'inputs' object")
    if "output" not in spec:
        raise SpecError("figure spec needs an 'output' path")

    if kind == "report":
        manifest = _load(_need(inputs, "manifest"), "homlab/report/1")
        base = os.path.dirname(os.path.abspath(_need(inputs, "manifest")))
        files = manifest["files"]
        fig, axes = plt.subplots(2, 2, figsize=(10, 8))
        extracted = {}
        panel_inputs = {
            "lambda_convergence": {"corrector": "corrector"},
            "epsilon_convergence": {"sweep": "epsilon_sweep", "corrector": "corrector"},
            "ergodic_decay": {"ergodic": "ergodic"},
            "gaussianity_qq": {"diagnostics": "diagnostics"},
        }
        for ax, (panel_kind, mapping) in zip(axes.ravel(), panel_inputs.items()):
            sub = {key: os.path.join(base, files[name])
                   for key, name in mapping.items() if name in files}
            if not sub:
                ax.set_axis_off()
                continue
            extracted[panel_kind] = PANELS[panel_kind](ax, sub)
        fig.suptitle("homogenization run report")
        fig.tight_layout()
        return fig, extracted

    fig, ax = plt.subplots(figsize=(6, 4.5))
    extracted = {kind: PANELS[kind](ax, inputs)}
    fig.tight_layout()
    return fig, extracted


def render(spec, extract_path=None):
    fig, extracted = build_figure(spec)
    out = spec["output"]
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    fig.savefig(out, dpi=130)
    plt.close(fig)
    if extract_path:
        with open(extract_path, "w") as fh:
            json.dump(extracted, fh, indent=1)
    return extracted


def specs_from_manifest(manifest_path, outdir):
    """The four demo figure specs for a completed run."""
    manifest = _load(manifest_path, "homlab/report/1")
    base = os.path.dirname(os.path.abspath(manifest_path))
    files = {k: os.path.join(base, v) for k, v in manifest["files"].items()}
    wanted = [
        ("lambda_convergence", {"corrector": files.get("corrector")},
         ("corrector",)),
        ("epsilon_convergence", {"sweep": files.get("epsilon_sweep"),
                                 "corrector": files.get("corrector")},
         ("sweep",)),
        ("ergodic_decay", {"ergodic": files.get("ergodic")}, ("ergodic",)),
        ("gaussianity_qq", {"diagnostics": files.get("diagnostics")},
         ("diagnostics",)),
    ]
    specs = []
    for kind, inputs, required in wanted:
        inputs = {k: v for k, v in inputs.items() if v}
        if any(k not in inputs for k in required):
            continue
        specs.append({"schema": FIGURE_SCHEMA, "kind": kind, "inputs": inputs,
                      "output": os.path.join(outdir, f"{kind}.png")})
    return specs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", help="figure spec JSON")
    ap.add_argument("--extract", help="write plotted arrays to this JSON")
    ap.add_argument("--all", dest="manifest", help="render every demo figure "
                    "for a run manifest")
    ap.add_argument("--outdir", default="figs", help="output directory for --all")
    ap.add_argument("--extract-dir", help="per-figure array dumps for --all")
    args = ap.parse_args(argv)
    try:
        if args.manifest:
            specs = specs_from_manifest(args.manifest, args.outdir)
            for spec in specs:
                extract = (os.path.join(args.extract_dir, spec["kind"] + ".json")
                           if args.extract_dir else None)
                if extract:
                    os.makedirs(args.extract_dir, exist_ok=True)
                render(spec, extract)
                print(f"rendered {spec['output']}")
            return 0
        if not args.spec:
            raise SpecError("pass --spec or --all")
        with open(args.spec) as fh:
            spec = json.load(fh)
        render(spec, args.extract)
        print(f"rendered {spec['output']}")
        return 0
    except (SpecError, json.JSONDecodeError, KeyError) as exc:
        print(f"figure spec error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
