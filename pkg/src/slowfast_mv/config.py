"""Experiment configuration: YAML files plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigInvalid

__all__ = ["COMMANDS", "REQUIRED", "load_config", "apply_overrides", "validate_config", "config_fingerprint"]

COMMANDS = ("simulate", "frozen", "invariant", "averaged", "corrector", "strong-rate", "clt-rate",
            "fluctuation", "ergodic", "ito-check")

REQUIRED = {
    "simulate": ("epsilon", "N", "T", "h"),
    "frozen": ("N", "T", "dt"),
    "invariant": ("N", "dt"),
    "averaged": ("N", "T", "dt"),
    "corrector": ("N", "M", "dt"),
    "strong-rate": ("epsilon_grid", "N", "T", "h", "replicas"),
    "clt-rate": ("epsilon_grid", "N", "T", "h", "replicas"),
    "fluctuation": ("epsilon_grid", "N", "T", "h", "replicas"),
    "ergodic": ("N", "T", "dt"),
    "ito-check": ("N", "T", "dt", "replicas"),
}

TOP_LEVEL = {"command", "master_seed", "output_dir", "plot", "model", "experiment", "init", "thresholds",
             "limit"}


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}", key="config") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config is not valid YAML: {exc}", key="config") from exc
    if not isinstance(cfg, dict):
        raise ConfigInvalid("config must be a mapping", key="config")
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    """Return a copy of ``cfg`` with ``a.b.c=value`` overrides applied (values parsed as YAML)."""
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} is not key=value", key=item)
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigInvalid(f"empty override key in {item!r}", key=item)
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigInvalid(f"cannot set {key}: {p} is not a mapping", key=key)
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _num(exp, key, cast=float):
    try:
        return cast(exp[key])
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"experiment.{key} must be numeric", key=key) from exc


def validate_config(cfg: dict) -> dict:
    """Check the command, required keys and numeric ranges; returns ``cfg``."""
    unknown = set(cfg) - TOP_LEVEL
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigInvalid(f"unknown top-level key {k!r}", key=k)
    cmd = cfg.get("command")
    if cmd not in COMMANDS:
        raise ConfigInvalid(f"command must be one of {', '.join(COMMANDS)}; got {cmd!r}", key="command")
    if "model" not in cfg or not isinstance(cfg["model"], dict):
        raise ConfigInvalid("missing model block", key="model")
    exp = cfg.get("experiment") or {}
    if not isinstance(exp, dict):
        raise ConfigInvalid("experiment must be a mapping", key="experiment")
    for key in REQUIRED[cmd]:
        if key not in exp:
            raise ConfigInvalid(f"missing required key {key!r} for {cmd}", key=key)
    if "epsilon" in exp:
        e = _num(exp, "epsilon")
        if not 0 < e < 1:
            raise ConfigInvalid(f"epsilon must lie in (0, 1), got {e}", key="epsilon")
    if "epsilon_grid" in exp:
        grid = exp["epsilon_grid"]
        if not isinstance(grid, (list, tuple)) or len(grid) < 3:
            raise ConfigInvalid("epsilon_grid needs at least 3 values", key="epsilon_grid")
        try:
            g = [float(v) for v in grid]
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid("epsilon_grid must be numeric", key="epsilon_grid") from exc
        if any(not 0 < v < 1 for v in g):
            raise ConfigInvalid("epsilon_grid values must lie in (0, 1)", key="epsilon_grid")
        if any(b >= a for a, b in zip(g, g[1:])):
            raise ConfigInvalid("epsilon_grid must be strictly decreasing", key="epsilon_grid")
    if "N" in exp and _num(exp, "N", int) < 2:
        raise ConfigInvalid("N must be at least 2", key="N")
    if "T" in exp and not _num(exp, "T") > 0:
        raise ConfigInvalid("T must be positive", key="T")
    if "h" in exp:
        h = _num(exp, "h")
        if not 0 < h <= 0.5:
            raise ConfigInvalid(f"h must lie in (0, 0.5], got {h}", key="h")
    for key in ("dt", "M", "replicas"):
        if key in exp and not _num(exp, key) > 0:
            raise ConfigInvalid(f"{key} must be positive", key=key)
    if "master_seed" in cfg:
        try:
            int(cfg["master_seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid("master_seed must be an integer", key="master_seed") from exc
    return cfg


def config_fingerprint(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
