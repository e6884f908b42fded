"""Experiment configuration: a strict key=value text format whose keys map
one-to-one onto CLI flag names. Unknown keys are rejected and numeric ranges
are validated at parse time; flags override file values."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .imgproc import AugmentConfig
from .model import ModelConfig
from .nn import BackboneConfig
from .pipeline import PreprocessParams
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def _parse_float_tuple(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


@dataclass
class ExperimentConfig:
    out_dir: str = "out"
    seed: int = 7
    # preprocessing
    size0: int = 224
    size3: int = 300
    disc_threshold: int = 20
    sigma_frac: float = 0.05
    bg_alpha: float = 4.0
    bg_beta: float = -4.0
    bg_gamma: float = 128.0
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, ...] = (8, 8)
    reference: str = ""
    reference_domain: str = "synthA"
    # augmentation
    hflip: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    gamma_lo: float = 0.9
    gamma_hi: float = 1.1
    # input normalization
    norm_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, ...] = (0.25, 0.25, 0.25)
    # model
    b0_channels: tuple[int, ...] = (16, 32, 64, 128)
    b3_channels: tuple[int, ...] = (24, 48, 96, 160)
    b0_dim: int = 128
    b3_dim: int = 160
    fused_dim: int = 128
    gate_hidden: bool = False
    # training
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    steps_per_epoch: int = 0
    weight_exponent: float = 1.0
    # splitting
    val_fraction: float = 0.2
    # data locations (usually given as flags)
    train_proc: str = ""
    val_proc: str = ""

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.size0 >= 16 and self.size3 >= 16, "size0/size3 must be >= 16"),
            (0 <= self.disc_threshold <= 255, "disc_threshold must be in [0, 255]"),
            (0.0 < self.sigma_frac <= 0.5, "sigma_frac must be in (0, 0.5]"),
            (self.clahe_clip >= 1.0, "clahe_clip must be >= 1"),
            (len(self.clahe_tiles) == 2 and min(self.clahe_tiles) >= 1,
             "clahe_tiles must be two counts >= 1"),
            (0.0 <= self.hflip <= 1.0, "hflip must be in [0, 1]"),
            (0.0 <= self.brightness <= 1.0, "brightness must be in [0, 1]"),
            (0.0 <= self.contrast <= 1.0, "contrast must be in [0, 1]"),
            (0.0 < self.gamma_lo <= self.gamma_hi, "gamma range must satisfy 0 < lo <= hi"),
            (len(self.norm_mean) == 3 and len(self.norm_std) == 3,
             "norm_mean/norm_std must have three components"),
            (all(v > 0 for v in self.norm_std), "norm_std components must be > 0"),
            (len(self.b0_channels) >= 1 and len(self.b3_channels) >= 1,
             "backbone channel lists must be non-empty"),
            (self.b0_dim >= 1 and self.b3_dim >= 1 and self.fused_dim >= 1,
             "feature dims must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1/beta2 must be in [0, 1)"),
            (self.eps > 0, "eps must be > 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.steps_per_epoch >= 0, "steps_per_epoch must be >= 0"),
            (0.0 < self.val_fraction < 1.0, "val_fraction must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # views onto the typed sub-configs the library modules use
    def preprocess_params(self) -> PreprocessParams:
        return PreprocessParams(self.disc_threshold, self.sigma_frac, self.bg_alpha,
                                self.bg_beta, self.bg_gamma, self.clahe_clip,
                                (self.clahe_tiles[0], self.clahe_tiles[1]),
                                self.size0, self.size3)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.hflip, self.brightness, self.contrast,
                             (self.gamma_lo, self.gamma_hi))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            b0=BackboneConfig(self.size0, tuple(self.b0_channels), self.b0_dim),
            b3=BackboneConfig(self.size3, tuple(self.b3_channels), self.b3_dim),
            fused_dim=self.fused_dim,
            gate_hidden=self.gate_hidden,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.beta1, self.beta2, self.eps, self.epochs,
                           self.batch_size, self.seed, self.steps_per_epoch)


_PARSERS = {
    str: lambda s: s,
    int: int,
    float: float,
    bool: _parse_bool,
}


def _field_parser(f):
    if f.type in ("tuple[int, ...]",):
        return _parse_int_tuple
    if f.type in ("tuple[float, ...]",):
        return _parse_float_tuple
    for t, parser in _PARSERS.items():
        if f.type == t.__name__:
            return parser
    raise AssertionError(f"unhandled config field type {f.type}")


def load_config(path) -> ExperimentConfig:
    """Parse a key=value file; '#' starts a comment, blank lines are ignored."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = ExperimentConfig()
    known = {f.name: f for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _field_parser(known[key])(value))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return cfg.validate()


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply non-None CLI flag values on top of the config file."""
    known = {f.name for f in fields(ExperimentConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config override {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
