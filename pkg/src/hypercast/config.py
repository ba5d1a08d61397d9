"""Run configuration: one YAML/JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .train import TrainConfig

NORMALIZED_MIN_DELTA = 1e-4

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "sessions_csv": None,
        "stations_csv": None,
        "panel_csv": None,
        "split_ratio": 0.8,
        "impute_empty_days": True,
    },
    "synth": {"N_s": 4, "T": 400, "noise_sigma": 1.0, "amplitude": 10.0},
    "hypergraph": {"fcm_m": 2.0, "fcm_tol": 1e-6, "fcm_max_iter": 300, "anchor": -1},
    "model": {"K": 2, "T_r": 14, "T_w": 3, "T_f": 3},
    "train": {},
    "checkpoint": None,
    "grid": None,
}

SECTIONS = {"data", "synth", "hypergraph", "model", "train"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        where = f"{path}{key}"
        if key not in out and path.rstrip(".") not in ("model", "train"):
            raise ConfigError(f"unknown config key {where}")
        if isinstance(out.get(key), dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot, such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def parse_override(text: str) -> dict:
    """``model.d_h=16`` -> ``{"model": {"d_h": 16}}`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = load_yaml(raw)
    out: dict = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "RunConfig":
        raw = copy.deepcopy(DEFAULTS)
        if path is not None:
            loaded = load_yaml(Path(path).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            raw = _merge(raw, loaded)
        for item in overrides or []:
            raw = _merge(raw, parse_override(item))
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def panel_csv(self) -> Path:
        p = self.raw["data"]["panel_csv"]
        return Path(p) if p else self.output_dir / "panel.csv"

    @property
    def checkpoint(self) -> Path:
        p = self.raw["checkpoint"]
        return Path(p) if p else self.output_dir / "model.params"

    def model_config(self, N_s: int | None = None) -> ModelConfig:
        m = dict(self.raw["model"])
        if N_s is not None:
            if m.get("N_s") not in (None, N_s):
                raise ConfigError(f"model.N_s={m['N_s']} but the panel has {N_s} stations")
            m["N_s"] = N_s
        try:
            return ModelConfig.from_dict(m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t.setdefault("seed", self.seed)
        if "early_stop_min_delta" not in t and self.raw["model"].get("normalize_inputs", True):
            t["early_stop_min_delta"] = NORMALIZED_MIN_DELTA
        try:
            return TrainConfig.from_dict(t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def validate(self) -> None:
        for key in SECTIONS:
            if not isinstance(self.raw.get(key), dict):
                raise ConfigError(f"section {key} must be a mapping")
        m = dict(self.raw["model"])
        m.setdefault("N_s", int(m.get("K", 1)) + 1)
        try:
            ModelConfig.from_dict(m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None
        self.train_config()
        ratio = self.raw["data"]["split_ratio"]
        if not 0 < float(ratio) < 1:
            raise ConfigError(f"data.split_ratio must lie in (0, 1), got {ratio}")
        grid = self.raw.get("grid")
        if grid is not None:
            if not isinstance(grid, dict) or not grid:
                raise ConfigError("grid must be a non-empty mapping of model field -> list")
            for k, vals in grid.items():
                if k not in ("K", "T_r", "T_w", "T_f") or not isinstance(vals, list) or not vals:
                    raise ConfigError(f"grid.{k}: expected a non-empty list over K/T_r/T_w/T_f")

    def resolved(self) -> dict:
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_model(self, **changes) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["model"].update(changes)
        return RunConfig(raw)
