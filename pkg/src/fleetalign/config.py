"""Flat ``key = value`` run configuration with typed keys and ``--set`` overrides.

Lines starting with ``#`` are comments. Keys are listed in ``SCHEMA`` with
their type and default; lists are comma-separated. Keys prefixed ``fleet.``
configure the synthetic fleet generator.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .fleet import SweepConfig, SyntheticFleetConfig
from .losses import LossWeights
from .trainer import ALIGNMENT_KINDS, ArchitectureSpec


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str_list(v: str) -> tuple:
    return tuple(s.strip() for s in v.split(",") if s.strip())


def _int_list(v: str) -> tuple:
    return tuple(int(s) for s in _str_list(v))


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_str(v: str):
    return None if v.strip().lower() in ("", "none") else v.strip()


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "workers": (int, 1),
    # architecture
    "kind": (str, "HAFAs"),
    "kinds": (_str_list, ALIGNMENT_KINDS + ("HELM",)),
    "epochs": (int, 200),
    "batch_size": (int, 1000),
    "lr": (float, 1e-4),
    "beta": (float, 1.0),
    "alpha": (float, 1.0),
    "delta_w": (float, 1.0),
    "gp_weight": (float, 10.0),
    "hidden": (int, 10),
    "n_features": (int, 10),
    "elm_hidden": (int, 50),
    "elm_ridge": (float, 1e-3),
    "elm_activation": (str, "sigmoid"),
    "gamma": (float, 1.5),
    "percentile": (float, 99.5),
    "vae_inference": (str, "mu"),
    "homothety_absolute": (_bool, False),
    "helm_sizes": (_int_list, (10,)),
    "helm_ridge": (float, 1e-3),
    "elm_input_scaling": (_bool, True),
    # data
    "manifest": (_opt_str, None),
    "source": (_opt_str, None),
    "target": (_opt_str, None),
    "source_csv": (_opt_str, None),
    "target_csv": (_opt_str, None),
    "train_window": (_opt_int, None),
    "blackout_window": (_opt_int, None),
    "detection_time": (_opt_int, None),
    "validation_fraction": (float, 0.06),
    "normalization": (str, "unit"),
    "channels": (_str_list, ("output_power", "igv_angle")),
    "mmd_max_rows": (int, 2000),
    # sweep
    "skip_stable_targets": (_bool, False),
    "results": (_opt_str, None),
    "selection": (_opt_str, None),
}
for _f in fields(SyntheticFleetConfig):
    _parse = {int: int, float: float, "int": int, "float": float}.get(_f.type, float)
    SCHEMA[f"fleet.{_f.name}"] = (_parse, _f.default)
SCHEMA["fleet.seed"] = (_opt_int, None)  # none: follow the master seed


def _parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_assignment(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    return key, _parse_value(key, raw)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file (if any), then ``key=value`` overrides, in that order."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                key, value = parse_assignment(line)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{n}: {exc}") from None
            cfg[key] = value
    for item in overrides:
        key, value = parse_assignment(item)
        cfg[key] = value
    return cfg


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: dict) -> str:
    """Inverse of ``load_config``: one sorted ``key = value`` line per key."""
    return "".join(f"{k} = {_format(cfg[k])}\n" for k in sorted(cfg))


_SPEC_KEYS = ("epochs", "batch_size", "lr", "hidden", "n_features", "elm_hidden", "elm_ridge", "elm_activation",
              "gamma", "percentile", "vae_inference", "homothety_absolute", "helm_sizes", "helm_ridge",
              "elm_input_scaling")


def architecture_spec(cfg: dict, kind: str | None = None, seed: int | None = None) -> ArchitectureSpec:
    try:
        weights = LossWeights(cfg["beta"], cfg["alpha"], cfg["delta_w"], cfg["gp_weight"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ArchitectureSpec(kind or cfg["kind"], weights, seed=cfg["seed"] if seed is None else seed,
                            **{k: cfg[k] for k in _SPEC_KEYS})


def fleet_config(cfg: dict) -> SyntheticFleetConfig:
    kw = {f.name: cfg[f"fleet.{f.name}"] for f in fields(SyntheticFleetConfig)}
    kw["seed"] = cfg["seed"] if cfg["fleet.seed"] is None else cfg["fleet.seed"]
    return SyntheticFleetConfig(**kw)


def sweep_config(cfg: dict) -> SweepConfig:
    # validated through a Wasserstein kind so that any delta_w is accepted; the sweep
    # resets delta_w to 1 for the other kinds
    arch = architecture_spec(cfg, kind="HAFAw").to_dict()
    for key in ("kind", "seed", "epochs", "batch_size", "lr"):
        arch.pop(key)
    return SweepConfig(tuple(cfg["kinds"]), cfg["seed"], cfg["epochs"], cfg["batch_size"], cfg["lr"],
                       cfg["normalization"], cfg["workers"], arch, cfg["skip_stable_targets"])
