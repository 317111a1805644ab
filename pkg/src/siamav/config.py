"""Run configuration: one JSON document with model, loss, mask, data, train and eval sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataConfig
from .eval import EvalConfig
from .loss import LossConfig
from .mask import DEFAULT_RATIOS, check_ratios
from .model import ModelConfig
from .tensor import ConfigError
from .train import PhaseConfig, TrainConfig

PROFILES = ("paper", "tiny")


@dataclass
class MaskConfig:
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self):
        self.ratios = check_ratios(self.ratios)


SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "mask": MaskConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# nested dataclass fields, so unknown keys inside them are caught too
_NESTED = {(TrainConfig, "pretrain"): PhaseConfig, (TrainConfig, "finetune"): PhaseConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        sub = _NESTED.get((cls, k))
        kwargs[k] = _build(sub, v, f"{where}.{k}") if sub else v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad value in {where}: {e}") from e


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``doc`` on ``base`` (defaults when omitted), section by section."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        merged = (base or cls()).to_dict()
        for name, values in doc.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section {name} must be an object")
            for k, v in values.items():
                if isinstance(v, dict) and isinstance(merged[name].get(k), dict):
                    merged[name][k] = {**merged[name][k], **v}
                else:
                    merged[name][k] = v
        return cls(**{name: _build(SECTIONS[name], merged[name], name) for name in SECTIONS})

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(doc, base)

    def to_dict(self) -> dict:
        return _plain(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def canonical_hash(doc: dict) -> str:
    """Digest of a config document that ignores key order."""
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def paper_profile() -> RunConfig:
    """Full-size geometry and the published pretraining/finetuning hyperparameters."""
    return RunConfig()


def tiny_profile() -> RunConfig:
    """CPU-scale geometry used by tests and the synthetic benchmark."""
    return RunConfig(
        model=ModelConfig(
            image_size=(64, 64), audio_size=(128, 64), patch=16, d=32, encoder_depth=2,
            heads=4, mlp_ratio=4.0, mm_depth=2, dec_depth=2, dec_width=16, dec_heads=4,
        ),
        loss=LossConfig(),
        mask=MaskConfig(),
        data=DataConfig(K=8, n_train=256, n_eval=128, noise_sigma=0.05, max_classes=1, seed=0),
        train=TrainConfig(
            pretrain=PhaseConfig(batch_size=48, epochs=60, lr=5e-4, decay_start_epoch=40, decay_rate=0.5, decay_step=10),
            finetune=PhaseConfig(
                batch_size=32, epochs=25, lr=5e-4, decay_start_epoch=15, decay_rate=0.5,
                decay_step=5, head_lr_multiplier=10.0,
            ),
            task="ce",
        ),
        eval=EvalConfig(bench_steps=3, bench_batch=12),
    )


def profile(name: str) -> RunConfig:
    if name == "paper":
        return paper_profile()
    if name == "tiny":
        return tiny_profile()
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
