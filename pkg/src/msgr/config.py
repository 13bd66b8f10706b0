"""Training configuration, presets and the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .align import AlignConfig
from .losses import LossWeights

STAGES = ("align", "recon", "joint")

# stage -> (epochs, learning rate, per-epoch decay)
STAGE_DEFAULTS = {
    "align": (150, 1e-4, 0.96),
    "recon": (10, 1e-4, 0.96),
    "joint": (50, 5e-5, 0.96),
}
DESK_EPOCH_DIVISOR = 5


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    N: int = 5
    T: int = 3
    d: int = 32
    hidden: int = 256
    offset_scale: float = 1.0
    reduction: int = 2
    depth: int = 3
    decoder_hidden: int = 0
    seed: int = 0
    perceptual_seed: int = 1234

    def align_config(self) -> AlignConfig:
        return AlignConfig(N=self.N, T=self.T, d=self.d, offset_scale=self.offset_scale, hidden=self.hidden)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "channels" in kw:
            kw["channels"] = tuple(int(c) for c in kw["channels"])
        return cls(**kw)


PRESETS = {
    "full": dict(channels=(16, 32, 64, 128), N=5, T=3, size=224, rho=32),
    "desk": dict(channels=(8, 16, 32, 64), N=3, T=2, size=128, rho=16),
}


@dataclass
class TrainConfig:
    stage: str = "align"
    epochs: int | None = None
    learning_rate: float | None = None
    decay_rate: float | None = None
    batch_size: int = 4
    seed: int = 0
    preset: str = "full"
    size: int = 224
    rho: float = 32
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    band: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        epochs, lr, decay = STAGE_DEFAULTS[self.stage]
        if self.preset == "desk":
            epochs = max(1, epochs // DESK_EPOCH_DIVISOR)
        if self.epochs is None:
            self.epochs = epochs
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.decay_rate is None:
            self.decay_rate = decay

    @classmethod
    def preset_config(cls, preset: str, stage: str = "align", **overrides) -> "TrainConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        p = dict(PRESETS[preset])
        model = ModelConfig(channels=p.pop("channels"), N=p.pop("N"), T=p.pop("T"))
        model_over = {k: overrides.pop(k) for k in list(overrides) if k in ModelConfig.__dataclass_fields__}
        model = dataclasses.replace(model, **model_over)
        return cls(stage=stage, preset=preset, model=model, **{**p, **overrides})

    def echo(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("weights", "model")}
        d.update({f"lambda{i}": getattr(self.weights, f"l{i}") for i in range(1, 7)})
        d.update(self.model.to_dict())
        return d


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    """Read a config file; CLI ``overrides`` (e.g. ``stage``) win over file values."""
    raw = parse_config_text(Path(path).read_text()) if path else {}
    raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    preset = raw.pop("preset", "full")
    stage = raw.pop("stage", "align")
    weights = {}
    typed = {}
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    lw = LossWeights()
    mc = ModelConfig()
    for k, v in raw.items():
        if k.startswith("lambda") and k[6:].isdigit():
            weights[f"l{k[6:]}"] = float(v)
        elif k in model_fields:
            typed[k] = _coerce(v, getattr(mc, k))
        elif k in ("epochs", "batch_size", "seed", "band", "size"):
            typed[k] = int(v)
        elif k in ("learning_rate", "decay_rate", "rho"):
            typed[k] = float(v)
        elif k not in train_fields:
            raise ValueError(f"unknown config key {k!r}")
    cfg = TrainConfig.preset_config(preset, stage, **typed)
    cfg.weights = dataclasses.replace(lw, **weights)
    return cfg
