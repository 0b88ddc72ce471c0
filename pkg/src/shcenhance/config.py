"""Run configuration: YAML files validated against the bundled JSON schema.

Every schema default describes the reference setup (16-mic UCA of radius
0.035 m, 6 x 5 x 4 m room, SNR and RT60 grids, 400/200 sine STFT, order 4),
so an empty file is a valid configuration.
"""
from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError


@lru_cache(maxsize=None)
def schema() -> dict:
    return json.loads(resources.files("shcenhance").joinpath("data/config_schema.json").read_text())


def _fill_defaults(node: dict, sch: dict) -> dict:
    out = dict(node)
    for key, sub in sch.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if sub.get("type") == "object" and isinstance(out.get(key), dict):
            out[key] = _fill_defaults(out[key], sub)
    return out


def resolve(raw: dict | None) -> dict:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {loc}: {exc.message}") from None
    cfg = _fill_defaults(raw, schema())
    st = cfg["stft"]
    if st["n_fft"] < st["win_len"] or st["hop"] > st["win_len"]:
        raise ConfigError("stft: need n_fft >= win_len and hop <= win_len")
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return resolve({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return resolve(raw)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


def default_config_yaml() -> str:
    return dump_config(resolve({}))
