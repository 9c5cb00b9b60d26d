"""Run configuration: strict JSON schema, presets, and resolution.

A run is fully determined by its config file plus the master seed; every
emitted report embeds the resolved config so experiments are diffable and
replayable. Unknown keys anywhere are errors.
"""

from __future__ import annotations

import importlib.resources
import os
from typing import Any, Optional

from . import jsonio


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


_TOP_KEYS = {"seed", "workers", "medium", "sde", "corrector", "ergodic",
             "compare", "output"}
_MEDIUM_KEYS = {
    "constant": {"kind", "sigma", "b", "H", "seed"},
    "trig1d": {"kind", "c0", "c1", "c2", "v1", "v2", "seed"},
    "trig1dt": {"kind", "c0", "c1", "ct", "seed"},
    "trig1dw": {"kind", "c0", "c1", "speed", "seed"},
    "periodic31": {"kind", "alpha", "u", "seed"},
    "chessboard": {"kind", "p", "extent", "periodic", "mollifier", "seed"},
}
_SDE_KEYS = {"dt", "epsilon", "epsilons", "horizon", "observation_times",
             "n_paths", "n_media"}
_CORRECTOR_KEYS = {"shape", "lambdas", "delta0", "rtol", "max_iter"}
_ERGODIC_KEYS = {"observable", "t_grid", "n_paths", "dt"}
_COMPARE_KEYS = {"tolerance"}
_OUTPUT_KEYS = {"directory", "formats"}


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def validate(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    out = dict(doc)
    out.setdefault("seed", 0)
    out.setdefault("workers", 1)
    if not isinstance(out["seed"], int) or out["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if not isinstance(out["workers"], int) or out["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    med = out.get("medium")
    if med is not None:
        if not isinstance(med, dict) or "kind" not in med:
            raise ConfigError("medium section needs a 'kind'")
        kind = med["kind"]
        if kind not in _MEDIUM_KEYS:
            raise ConfigError(f"unknown medium kind {kind!r}")
        _check_keys(med, _MEDIUM_KEYS[kind], f"medium ({kind})")
    for name, keys in (("sde", _SDE_KEYS), ("corrector", _CORRECTOR_KEYS),
                       ("ergodic", _ERGODIC_KEYS), ("compare", _COMPARE_KEYS),
                       ("output", _OUTPUT_KEYS)):
        sec = out.get(name)
        if sec is not None:
            if not isinstance(sec, dict):
                raise ConfigError(f"{name} section must be an object")
            _check_keys(sec, keys, name)
    return out


def require(cfg: dict, section: str) -> dict:
    sec = cfg.get(section)
    if sec is None:
        raise ConfigError(f"this command needs a '{section}' section in the config")
    return sec


def preset_names() -> list:
    files = importlib.resources.files("homlab.presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_config(path_or_preset: str, seed: Optional[int] = None,
                workers: Optional[int] = None) -> dict:
    """Load a config file, or a bundled preset when the argument is not a file."""
    if os.path.exists(path_or_preset):
        doc = jsonio.load(path_or_preset)
        source = os.path.abspath(path_or_preset)
    else:
        name = path_or_preset.removesuffix(".json")
        files = importlib.resources.files("homlab.presets")
        res = files / f"{name}.json"
        if not res.is_file():
            raise ConfigError(
                f"{path_or_preset!r} is neither a file nor a preset; presets: "
                f"{', '.join(preset_names())}")
        doc = jsonio.loads(res.read_text())
        source = f"preset:{name}"
    cfg = validate(doc)
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    cfg["_source"] = source
    return cfg


def resolved(cfg: dict) -> dict:
    """The config echo embedded in reports.

    Drops private keys and the worker count: workers control execution only,
    never results, so reports must be byte-identical across worker counts.
    """
    return {k: v for k, v in cfg.items() if not k.startswith("_") and k != "workers"}
