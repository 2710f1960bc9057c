"""Run configuration: one JSON document merging every stage's settings.

Layout::

    {"n_leads": 12, "seed": 0,
     "preprocess": {...}, "augment": {...}, "model": {...}, "train": {...},
     "paths": {"data_dir": ..., "class_list": ..., "weights": ..., "out_dir": ...}}

Model fields missing from the file take the preset for ``n_leads``. Command
line flags override the file, which overrides the defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig
from .exceptions import ConfigurationError
from .ingest import PreprocessConfig
from .network import LEAD_PRESETS, ModelConfig
from .train import TrainConfig

PATH_KEYS = ("data_dir", "class_list", "weights", "out_dir")
TOP_KEYS = {"n_leads", "seed", "preprocess", "augment", "model", "train", "paths"}


def _build(cls, section: str, data: dict):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config section {section!r}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    n_leads: int = 12
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig.for_leads(12))
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "RunConfig":
        """Validate and merge. ``overrides`` (``n_leads``, ``seed``, ``out_dir``) win over ``data``."""
        data = dict(data or {})
        unknown = set(data) - TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
        for section in ("preprocess", "augment", "model", "train", "paths"):
            if not isinstance(data.get(section, {}), dict):
                raise ConfigurationError(f"config section {section!r} must be an object")
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        n_leads = overrides.get("n_leads", data.get("n_leads", 12))
        if n_leads not in LEAD_PRESETS:
            raise ConfigurationError(f"n_leads must be one of {sorted(LEAD_PRESETS)}, got {n_leads!r}")
        seed = overrides.get("seed", data.get("seed", 0))
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigurationError(f"seed must be an integer, got {seed!r}")

        model_data = dict(data.get("model", {}))
        if "n_leads" in model_data and model_data["n_leads"] != n_leads:
            raise ConfigurationError(
                f"model.n_leads={model_data['n_leads']} disagrees with n_leads={n_leads}"
            )
        # dropout lives in both dataclasses; the train section wins
        dropout = data.get("train", {}).get("dropout", model_data.get("dropout", TrainConfig.dropout))
        model_data = {**LEAD_PRESETS[n_leads], **model_data, "n_leads": n_leads, "seed": seed,
                      "dropout": dropout}
        train_data = {**dict(data.get("train", {})), "seed": seed, "dropout": dropout}
        aug_data = {**dict(data.get("augment", {})), "seed": seed,
                    "window_seconds": model_data.get("window_seconds", 15.0)}
        prep_data = dict(data.get("preprocess", {}))
        if "norm_range" in prep_data:
            prep_data["norm_range"] = tuple(prep_data["norm_range"])

        paths = dict(data.get("paths", {}))
        unknown = set(paths) - set(PATH_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown keys in config section 'paths': {sorted(unknown)}")
        if overrides.get("out_dir") is not None:
            paths["out_dir"] = str(overrides["out_dir"])

        model = _build(ModelConfig, "model", model_data)
        train = _build(TrainConfig, "train", train_data)
        prep = _build(PreprocessConfig, "preprocess", prep_data)
        if model.fs != prep.target_fs:
            raise ConfigurationError(
                f"model.fs={model.fs} must equal preprocess.target_fs={prep.target_fs}"
            )
        return cls(
            n_leads=n_leads,
            seed=seed,
            preprocess=prep,
            augment=_build(AugmentConfig, "augment", aug_data),
            model=model,
            train=train,
            paths=paths,
        )

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file not found: {path}")
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, overrides)

    def to_dict(self) -> dict:
        return {
            "n_leads": self.n_leads,
            "seed": self.seed,
            "preprocess": {**asdict(self.preprocess), "norm_range": list(self.preprocess.norm_range)},
            "augment": asdict(self.augment),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "paths": dict(self.paths),
        }

    def path(self, key: str, default=None):
        value = self.paths.get(key, default)
        return Path(value) if value is not None else None
