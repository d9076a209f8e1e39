"""Pipeline configuration: an INI file with one section per stage.

Unknown sections or keys are errors. Every value has a default, so an empty
file (or no file) yields the desk-scale configuration. Example::

    [meta]
    version = 1

    [tat]
    num_quantizers = 6

    [train]
    steps = 500
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .corpus import SynthConfig
from .owo import OwoConfig, PretrainConfig
from .skeleton import CanonConfig
from .tat import TatConfig, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    test_ratio: float = 0.15
    family_coverage: bool = True


@dataclass
class EvalConfig:
    r_precision_k: int = 3
    force: bool = False


@dataclass
class SweepConfig:
    pretrain_steps: int = 200
    train_steps: int = 400
    depths: str = "1,2,4,6,8"


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    synth: SynthConfig = field(default_factory=SynthConfig)
    canon: CanonConfig = field(default_factory=lambda: CanonConfig(scale_tolerance=1e-4))
    split: SplitConfig = field(default_factory=SplitConfig)
    owo: OwoConfig = field(default_factory=OwoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tat: TatConfig = field(default_factory=TatConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    SECTIONS = ("synth", "canon", "split", "owo", "pretrain", "tat", "train", "eval", "sweep")

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        checks = [
            (self.synth.families >= 1 and self.synth.sequences_per_family >= 1, "synth counts must be >= 1"),
            (1 <= self.synth.min_joints <= self.synth.max_joints, "synth joint range is empty"),
            (1 <= self.synth.min_frames <= self.synth.max_frames, "synth frame range is empty"),
            (self.canon.bone_ratio > 0, "canon.bone_ratio must be positive"),
            (self.canon.translation_policy in ("fold", "fold_mean", "reject"), "unknown canon.translation_policy"),
            (0.0 <= self.split.test_ratio <= 1.0, "split.test_ratio must be in [0, 1]"),
            (self.owo.d > 0 and self.owo.d % 2 == 0, "owo.d must be a positive even number"),
            (self.owo.layers >= 0, "owo.layers must be >= 0"),
            (self.owo.tau_init > 0, "owo.tau_init must be positive"),
            (min(self.pretrain.lambda_geo, self.pretrain.lambda_lca, self.pretrain.lambda_sem) >= 0,
             "loss weights must be non-negative"),
            (self.pretrain.steps >= 1 and self.train.steps >= 1, "step counts must be >= 1"),
            (self.tat.codebook_size >= 2, "tat.codebook_size must be >= 2"),
            (self.tat.num_quantizers >= 1, "tat.num_quantizers must be >= 1"),
            (self.tat.stride >= 2 and self.tat.stride % 2 == 0, "tat.stride must be an even number >= 2"),
            (self.tat.blocks >= 1, "tat.blocks must be >= 1"),
            (self.tat.d_model % self.tat.heads == 0, "tat.d_model must be divisible by tat.heads"),
            (0 < self.tat.ema_decay < 1, "tat.ema_decay must be in (0, 1)"),
            (0 <= self.train.augment_prob <= 1, "train.augment_prob must be in [0, 1]"),
            (self.train.lr > 0 and self.pretrain.lr > 0, "learning rates must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.tat.owo_dim != self.owo.d:
            raise ConfigError(f"tat.owo_dim ({self.tat.owo_dim}) must equal owo.d ({self.owo.d})")
        self.depths()

    def depths(self) -> list[int]:
        try:
            ds = [int(x) for x in self.sweep.depths.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"sweep.depths must be comma-separated integers, got {self.sweep.depths!r}") from None
        if not ds or min(ds) < 1:
            raise ConfigError("sweep.depths must list positive depths")
        return ds

    def section_hash(self, *sections: str) -> str:
        return config_hash(self.version, **{s: getattr(self, s) for s in sections})


def config_hash(version: int = CONFIG_VERSION, **sections) -> str:
    """Short digest of config dataclasses, as stored in checkpoint metadata."""
    payload = {name: asdict(value) for name, value in sections.items()}
    payload["version"] = version
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return raw.strip() or None
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = PipelineConfig()
    for section in parser.sections():
        if section == "meta":
            for key, raw in parser[section].items():
                if key != "version":
                    raise ConfigError(f"unknown key [meta] {key}")
                cfg.version = _coerce("meta", key, raw, 1)
            continue
        if section not in PipelineConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}; known keys: {', '.join(sorted(known))}")
            setattr(target, key, _coerce(section, key, raw, getattr(target, key)))
    cfg.validate()
    return cfg


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["[meta]", f"version = {cfg.version}", ""]
    for section in PipelineConfig.SECTIONS:
        lines.append(f"[{section}]")
        for k, v in asdict(getattr(cfg, section)).items():
            lines.append(f"{k} = {'' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
