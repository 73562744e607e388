"""Experiment configuration: a YAML file with a fixed, strictly checked schema.

Example::

    seed: 2023
    data:
      dir: data/mafengwo        # holds ug.tsv, ui.tsv, gi.tsv
    split: {train_ratio: 0.7, valid_ratio: 0.1}
    model: {d: 512, n_layers: 1, beta: 0.5, reg: 1.0e-5, lr: 0.001, batch_size: 2048}
    train: {epochs_max: 400, patience: 10}
    eval: {cutoffs: [10, 20]}
    output_dir: runs/mafengwo

Relative paths resolve against the config file's directory. Unknown keys are
rejected.
"""

from __future__ import annotations

import copy
import re
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import HyperParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-5`` style literals as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


DEFAULTS: dict[str, Any] = {
    "seed": None,
    "threads": 1,
    "output_dir": "runs/default",
    "data": {"dir": None, "ug": None, "ui": None, "gi": None, "n_users": None, "n_groups": None, "n_items": None},
    "split": {"train_ratio": 0.7, "valid_ratio": 0.1, "seed": None},
    "model": HyperParams().to_dict(),
    "train": {"epochs_max": 500, "patience": 10, "eval_every": 1, "seed": None, "monitor_k": 10},
    "eval": {"cutoffs": [10, 20], "per_user_csv": True},
    "cold_start": {"k": [1, 2, 3, 4], "seed": None},
    "ablation": {"preset": "pa", "variants": None},
    "analysis": {"bins": 100, "items": False},
}

ABLATION_PRESETS: dict[str, list[dict]] = {
    "pa": [
        {"name": "CFAG", "pa_mode": "full"},
        {"name": "w/o PA", "pa_mode": "no_pa"},
        {"name": "w/o item", "pa_mode": "no_item"},
        {"name": "w/o group", "pa_mode": "no_group"},
    ],
    "layers": [
        {"name": "CFAG", "partition": "split", "merge": "concat"},
        {"name": "P1", "partition": "linear", "merge": "concat"},
        {"name": "M1", "partition": "split", "merge": "fc_before"},
        {"name": "M2", "partition": "split", "merge": "fc_after"},
    ],
}


def _merge_strict(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key '{where}{key}'")
        if isinstance(base[key], dict) and base[key]:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a mapping")
            out[key] = _merge_strict(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    source: Path | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict | None, source: Path | None = None) -> "ExperimentConfig":
        raw = _merge_strict(DEFAULTS, data or {}, "")
        base = source.parent if source is not None else Path.cwd()
        cfg = cls(raw, source, base)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = _yaml(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for item in overrides or []:
            apply_override(data, item)
        try:
            return cls.from_dict(data, path)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def validate(self) -> None:
        if self.raw["seed"] is None or not isinstance(self.raw["seed"], int):
            raise ConfigError("an integer 'seed' is required")
        try:
            self.hyper_params()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        ks = self.raw["cold_start"]["k"]
        if not ks or any(not isinstance(k, int) or k < 1 for k in ks):
            raise ConfigError("cold_start.k must be a non-empty list of integers >= 1")
        cut = self.raw["eval"]["cutoffs"]
        if not cut or any(not isinstance(k, int) or k < 1 for k in cut):
            raise ConfigError("eval.cutoffs must be positive integers")
        self.ablation_variants()

    # -- typed views ----------------------------------------------------
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def split_seed(self) -> int:
        s = self.raw["split"]["seed"]
        return self.seed if s is None else s

    @property
    def train_seed(self) -> int:
        s = self.raw["train"]["seed"]
        return self.seed + 1 if s is None else s

    @property
    def cap_seed(self) -> int:
        s = self.raw["cold_start"]["seed"]
        return self.seed + 2 if s is None else s

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    @property
    def cutoffs(self) -> list[int]:
        return list(self.raw["eval"]["cutoffs"])

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    def data_paths(self) -> dict[str, Path]:
        d = self.raw["data"]
        paths = {}
        for key in ("ug", "ui", "gi"):
            if d[key] is not None:
                paths[key] = self.resolve(d[key])
            elif d["dir"] is not None:
                paths[key] = self.resolve(d["dir"]) / f"{key}.tsv"
            else:
                raise ConfigError(f"data.{key} (or data.dir) is required")
        return paths

    def hyper_params(self, **overrides) -> HyperParams:
        m = dict(self.raw["model"], **overrides)
        fields = {f.name for f in dataclasses.fields(HyperParams)}
        unknown = set(m) - fields
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return HyperParams(**m)

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            epochs_max=t["epochs_max"], patience=t["patience"], eval_every=t["eval_every"],
            seed=self.train_seed, monitor_k=t["monitor_k"], threads=self.threads,
        )

    def ablation_variants(self) -> list[dict]:
        a = self.raw["ablation"]
        if a["variants"] is not None:
            variants = a["variants"]
        elif a["preset"] in ABLATION_PRESETS:
            variants = ABLATION_PRESETS[a["preset"]]
        else:
            raise ConfigError(f"unknown ablation preset {a['preset']!r}; choose from {sorted(ABLATION_PRESETS)}")
        if not variants:
            raise ConfigError("ablation needs at least one variant")
        for v in variants:
            if not isinstance(v, dict) or "name" not in v:
                raise ConfigError("each ablation variant needs a 'name'")
            try:
                self.hyper_params(**{k: x for k, x in v.items() if k != "name"})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"ablation variant {v['name']!r}: {exc}") from exc
        return [dict(v) for v in variants]


def apply_override(data: dict, item: str) -> None:
    """Apply a ``section.key=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    dotted, value = item.split("=", 1)
    keys = dotted.strip().split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: '{k}' is not a section")
    node[keys[-1]] = _yaml(value)
