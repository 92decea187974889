"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Recognised sections and keys (all optional, defaults shown by ``RunConfig()``)::

    [run]        seed, baseline (none | noise-only | mixup)
    [quant]      bits (e.g. 4w4a)
    [latent]     k, p, sigma_z, dim, dm_layers, ee_init, freeze_embeddings
    [generator]  hidden, conditional_bn
    [schedule]   epochs, iters_per_epoch, batch_size, g_lr, q_lr, q_momentum,
                 q_weight_decay, nesterov, lr_decay_factor, lr_decay_every_epochs,
                 calib_batches
    [loss]       alpha, delta
    [data]       num_classes, train_per_class, eval_per_class, input_shape,
                 separation, latent_dim, seed
    [teacher]    width, feature_dim, epochs
    [paths]      teacher, eval_data, train_data, out_dir

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field
from typing import Optional

from ..losses import LossWeights
from .data import ToyDatasetSpec

BASELINES = ("none", "noise-only", "mixup")


class ConfigError(ValueError):
    pass


_BITS = re.compile(r"^(\d+)w(\d+)a$")


def parse_bits(text: str) -> tuple[int, int]:
    """``"4w4a"`` -> ``(4, 4)``: weight bits, activation bits."""
    m = _BITS.match(text.strip().lower())
    if not m:
        raise ConfigError(f"malformed bit notation {text!r}; expected e.g. 4w4a")
    w, a = int(m.group(1)), int(m.group(2))
    if not (2 <= w <= 16 and 2 <= a <= 16):
        raise ConfigError(f"bit widths must be within [2, 16], got {text!r}")
    return w, a


@dataclass
class QuantSection:
    w_bits: int = 4
    a_bits: int = 4


@dataclass
class LatentSection:
    k: int = 2
    p: float = 0.4
    sigma_z: float = 1.0
    dim: int = 64
    dm_layers: int = 1
    ee_init: bool = True
    freeze_embeddings: bool = False


@dataclass
class GeneratorSection:
    hidden: int = 64
    conditional_bn: bool = True


@dataclass
class TrainSchedule:
    epochs: int = 40
    iters_per_epoch: int = 50
    batch_size: int = 64
    g_lr: float = 1e-3
    q_lr: float = 1e-4
    q_momentum: float = 0.9
    q_weight_decay: float = 1e-4
    nesterov: bool = True
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 10
    calib_batches: int = 4
    student_bn_train: bool = False
    g_warmup_epochs: int = 0

    def validate(self):
        for name in ("iters_per_epoch", "batch_size", "lr_decay_every_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule.{name} must be positive")
        if self.epochs < 0 or self.g_warmup_epochs < 0:
            raise ConfigError("schedule.epochs and schedule.g_warmup_epochs must be >= 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("schedule.lr_decay_factor must be in (0, 1]")

    def lr_at(self, base: float, epoch: int) -> float:
        return base * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


def full_schedule() -> TrainSchedule:
    """Full-length protocol: 400 x 200 iterations, lr x0.1 every 100 epochs."""
    return TrainSchedule(epochs=400, iters_per_epoch=200, batch_size=64, g_lr=1e-3, q_lr=1e-4,
                         q_momentum=0.9, q_weight_decay=1e-4, nesterov=True,
                         lr_decay_factor=0.1, lr_decay_every_epochs=100)


@dataclass
class TeacherSection:
    width: int = 16
    feature_dim: int = 32
    epochs: int = 30


@dataclass
class PathsSection:
    teacher: str = ""
    eval_data: str = ""
    train_data: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    baseline: str = "none"
    quant: QuantSection = field(default_factory=QuantSection)
    latent: LatentSection = field(default_factory=LatentSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        self.schedule.validate()
        if not 0 <= self.latent.p <= 1:
            raise ConfigError("latent.p must be in [0, 1]")
        if self.latent.sigma_z <= 0:
            raise ConfigError("latent.sigma_z must be positive")
        if not 1 <= self.latent.k <= self.data.num_classes:
            raise ConfigError("latent.k must be in [1, num_classes]")
        if self.latent.dm_layers < 0:
            raise ConfigError("latent.dm_layers must be >= 0")
        return self

    def effective(self) -> "RunConfig":
        """Copy with baseline presets applied.

        ``noise-only`` is the plain noise-driven generator: no superposition, no
        mapping layer, randomly initialised embeddings.
        """
        cfg = dataclasses.replace(self, latent=dataclasses.replace(self.latent))
        if cfg.baseline == "noise-only":
            cfg.latent.p = 0.0
            cfg.latent.dm_layers = 0
            cfg.latent.ee_init = False
        return cfg


_SECTIONS = {
    "quant": "quant", "latent": "latent", "generator": "generator", "schedule": "schedule",
    "loss": "loss", "data": "data", "teacher": "teacher", "paths": "paths",
}
_RUN_KEYS = ("seed", "baseline")


def _convert(raw: str, current, key: str):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in re.split(r"[x, ]+", raw.strip()) if v)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    return raw.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = RunConfig()
    for section in parser.sections():
        items = parser[section]
        if section == "run":
            for key, raw in items.items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key [run] {key}")
                setattr(cfg, key, _convert(raw, getattr(cfg, key), f"run.{key}"))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, _SECTIONS[section])
        for key, raw in items.items():
            if section == "quant" and key == "bits":
                cfg.quant.w_bits, cfg.quant.a_bits = parse_bits(raw)
                continue
            if not hasattr(target, key) or key.startswith("_"):
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _convert(raw, getattr(target, key), f"{section}.{key}"))
    return cfg.validate()


def load(path) -> RunConfig:
    try:
        with open(path) as f:
            return loads(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed), "baseline": cfg.baseline}
    parser["quant"] = {"bits": f"{cfg.quant.w_bits}w{cfg.quant.a_bits}a"}
    for section, attr in _SECTIONS.items():
        if section == "quant":
            continue
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for key in _RUN_KEYS:
        setattr(cfg, key, d[key])
    for attr in _SECTIONS.values():
        obj = getattr(cfg, attr)
        for k, v in d[attr].items():
            setattr(obj, k, tuple(v) if isinstance(getattr(obj, k), tuple) else v)
    return cfg


def override(cfg: RunConfig, seed: Optional[int] = None, bits: Optional[str] = None, k: Optional[int] = None,
             p: Optional[float] = None, sigma_z: Optional[float] = None, freeze_embeddings: Optional[bool] = None,
             dm_layers: Optional[int] = None, ee_init: Optional[bool] = None,
             baseline: Optional[str] = None) -> RunConfig:
    if seed is not None:
        cfg.seed = seed
    if bits is not None:
        cfg.quant.w_bits, cfg.quant.a_bits = parse_bits(bits)
    for name, value in (("k", k), ("p", p), ("sigma_z", sigma_z), ("freeze_embeddings", freeze_embeddings),
                        ("dm_layers", dm_layers), ("ee_init", ee_init)):
        if value is not None:
            setattr(cfg.latent, name, value)
    if baseline is not None:
        cfg.baseline = baseline
    return cfg.validate()
