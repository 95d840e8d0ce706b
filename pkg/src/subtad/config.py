"""Declarative run configuration: YAML file, dotted overrides, ablation toggles."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .encoder import EncoderConfig
from .graphs import WalkParams
from .online import DQNConfig
from .pretrain import PretrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


# toggle -> (section, key, value); each touches exactly one key
ABLATIONS = {
    "no_graph_embedding": ("encoder", "base_embedding", "random"),
    "no_route_gat": ("encoder", "route_gat", False),
    "no_stsc": ("pretrain", "alpha_stsc", 0.0),
    "no_miic": ("pretrain", "alpha_miic", 0.0),
    "no_reconstruction": ("pretrain", "alpha_rec", 0.0),
    "basic_rewards": ("dqn", "reward", "basic"),
}


def _packaged(name: str) -> dict:
    text = resources.files("subtad").joinpath("configs", name).read_text()
    return yaml.safe_load(text) or {}


def default_config() -> dict:
    return _packaged("default.yaml")


def preset(name: str) -> dict:
    """A packaged preset (``default`` or ``micro``) merged onto the defaults."""
    if name == "default":
        return default_config()
    try:
        return merge(default_config(), _packaged(f"{name}.yaml"))
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None


def merge(base: Mapping, override: Mapping, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = merge(out[k], v, where + ".")
        else:
            out[k] = _coerce(out[k], v, where)
    return out


def _coerce(default: Any, value: Any, where: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where!r} must be true or false")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where!r} must be numeric")
        return float(value) if isinstance(default, float) else value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where!r} must be a list")
        return value
    if isinstance(default, str) and not isinstance(value, (str, int)):
        raise ConfigError(f"{where!r} must be a string")
    return value


def parse_override(item: str) -> dict:
    """``a.b=v`` into a nested mapping, parsing ``v`` as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def apply_ablations(cfg: Mapping) -> dict:
    out = copy.deepcopy(dict(cfg))
    for name in out.get("ablations", []):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation toggle {name!r}; choose from {sorted(ABLATIONS)}")
        section, key, value = ABLATIONS[name]
        out[section][key] = value
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                base: str = "default") -> dict:
    """Defaults, then the file, then ``--set`` overrides, then ablations; validated."""
    cfg = preset(base)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, Mapping):
            raise ConfigError(f"config {path} must be a mapping at top level")
        cfg = merge(cfg, doc)
    for item in overrides:
        cfg = merge(cfg, parse_override(item))
    cfg = apply_ablations(cfg)
    validate(cfg)
    return cfg


def validate(cfg: Mapping) -> None:
    try:
        encoder_config(cfg)
        walk_params(cfg)
        pretrain_config(cfg)
        dqn_config(cfg)
        synth_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["spatial"]["indexer"] not in ("h3", "hexgrid"):
        raise ConfigError("spatial.indexer must be h3 or hexgrid")
    dp = cfg["detect"]["delta_p"]
    L = cfg["encoder"]["window"]
    if dp != "auto" and not (isinstance(dp, int) and 1 <= dp <= L):
        raise ConfigError(f"detect.delta_p must be 'auto' or an integer in [1, {L}]")
    c = cfg["cluster"]
    if c["eps"] <= 0 or c["min_pts"] < 1:
        raise ConfigError("cluster.eps must be positive and cluster.min_pts at least 1")
    if not 0 < cfg["itinerary"]["delta_od"] <= 1:
        raise ConfigError("itinerary.delta_od must lie in (0, 1]")


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def flatten(cfg: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, Mapping):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def encoder_config(cfg: Mapping) -> EncoderConfig:
    return EncoderConfig(**cfg["encoder"])


def walk_params(cfg: Mapping) -> WalkParams:
    return WalkParams(seed=cfg["seed"], **cfg["graph"])


def pretrain_config(cfg: Mapping) -> PretrainConfig:
    return PretrainConfig(seed=cfg["seed"], **cfg["pretrain"])


def dqn_config(cfg: Mapping) -> DQNConfig:
    return DQNConfig(seed=cfg["seed"], **cfg["dqn"])


def synth_config(cfg: Mapping) -> SynthConfig:
    s = dict(cfg["synth"])
    s["kinds"] = tuple(s["kinds"])
    return SynthConfig(seed=cfg["seed"], **s)
