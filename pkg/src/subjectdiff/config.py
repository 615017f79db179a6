"""Flat ``key = value`` run configuration with namespaced keys."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .curriculum import DataConfig
from .sampler import SamplerConfig
from .training import TrainConfig

SEED_ENV = "RCPP_SEED"


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _int(s):
    return int(s, 10)


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"{s!r} is not finite")
    return v


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _ints(s):
    return tuple(_int(p.strip()) for p in s.split(",") if p.strip())


def _gamma(s):
    parts = [_float(p.strip()) for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty gamma list")
    return parts[0] if len(parts) == 1 else parts


def _str(s):
    return s


# key -> (parser, default); None default means the key is required by the command that reads it
SCHEMA = {
    "backbone.latent_size": (_int, 16),
    "backbone.latent_channels": (_int, 8),
    "backbone.text_dim": (_int, 32),
    "backbone.image_tokens": (_int, 16),
    "backbone.encoder_dim": (_int, 32),
    "backbone.condition_dim": (_int, 32),
    "backbone.shallow_layers": (_int, 3),
    "backbone.encoder_depth": (_int, 6),
    "backbone.image_size": (_int, 32),
    "backbone.block_resolutions": (_ints, (16, 8, 16)),
    "backbone.heads": (_int, 2),
    "backbone.model_dim": (_int, 32),
    "backbone.timesteps": (_int, 50),
    "backbone.seed": (_int, 0),
    "backbone.ccp_mode": (_str, "concat_add"),
    "train.steps": (_int, None),
    "train.seed": (_int, None),
    "train.batch_size": (_int, 2),
    "train.lr": (_float, 1e-3),
    "train.r_min": (_float, 1.0),
    "train.r_max": (_float, math.sqrt(10.0)),
    "train.kind_sampling": (_str, "stratified"),
    "train.crop_multiview": (_bool, True),
    "data.shape_count": (_int, DataConfig().shape_count),
    "data.color_count": (_int, DataConfig().color_count),
    "data.background_count": (_int, DataConfig().background_count),
    "sampler.steps": (_int, 25),
    "sampler.omega": (_float, 7.5),
    "sampler.gamma": (_gamma, 0.2),
    "sampler.t_stop": (_int, 12),
    "sampler.seed": (_int, 0),
    "sampler.cross_source": (_str, "low"),
    "sampler.self_source": (_str, "high"),
    "sampler.mask_norm": (_str, "max"),
}

TRAIN_REQUIRED = ("train.steps", "train.seed")


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)  # key -> source line

    def get(self, key):
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    def set(self, key, raw, line=None):
        if key not in SCHEMA:
            raise ConfigError("unknown key", line, key)
        try:
            self.values[key] = SCHEMA[key][0](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value {raw.strip()!r} ({exc})", line, key) from None
        if line is not None:
            self.lines[key] = line

    def require(self, keys):
        for key in keys:
            if key not in self.values:
                raise ConfigError("missing required key", None, key)

    def backbone(self) -> BackboneConfig:
        kw = {k.split(".", 1)[1]: self.get(k) for k in SCHEMA if k.startswith("backbone.")}
        kw.pop("seed")
        kw.pop("ccp_mode")
        try:
            return BackboneConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train(self) -> TrainConfig:
        try:
            data = DataConfig(self.get("data.shape_count"), self.get("data.color_count"),
                              self.get("data.background_count"))
            return TrainConfig(steps=self.get("train.steps"), batch_size=self.get("train.batch_size"),
                               lr=self.get("train.lr"), seed=env_seed(self.get("train.seed")),
                               r_min=self.get("train.r_min"), r_max=self.get("train.r_max"),
                               kind_sampling=self.get("train.kind_sampling"),
                               crop_multiview=self.get("train.crop_multiview"), data=data)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def sampler(self) -> SamplerConfig:
        try:
            return SamplerConfig(steps=self.get("sampler.steps"), omega=self.get("sampler.omega"),
                                 gamma=self.get("sampler.gamma"), t_stop=self.get("sampler.t_stop"),
                                 seed=env_seed(self.get("sampler.seed")),
                                 cross_source=self.get("sampler.cross_source"),
                                 self_source=self.get("sampler.self_source"),
                                 mask_norm=self.get("sampler.mask_norm"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def env_seed(default):
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected key = value, got {body!r}", n, None)
        key, raw = body.split("=", 1)
        key = key.strip()
        if key in cfg.lines:
            raise ConfigError(f"duplicate key (first set on line {cfg.lines[key]})", n, key)
        cfg.set(key, raw, n)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
