"""Run configuration: nested dataclasses serialised as flat ``section.key=value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class EncoderConfig:
    model_dim: int = 256
    backbone: str = "toy"  # "toy" or "pretrained"
    # vision
    image_side: int = 224
    patch_size: int = 16
    vision_width: int = 768
    vision_depth: int = 12
    vision_heads: int = 12
    vision_freeze_depth: int = 10
    vision_pretrained: str = "vit_b_16"
    # text
    vocab_size: int = 30522
    max_tokens: int = 128
    kept_tokens: int = 50
    text_width: int = 768
    text_depth: int = 12
    text_heads: int = 12
    text_freeze_depth: int = 10
    text_pretrained: str = "emilyalsentzer/Bio_ClinicalBERT"
    # structured
    structured_input_dim: int = 6
    structured_hidden1: int = 128
    structured_hidden2: int = 256
    structured_dropout: float = 0.1
    backbone_dropout: float = 0.0


@dataclass
class FusionConfig:
    model_dim: int = 256
    layers: int = 6
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    norm_first: bool = True
    positions: bool = False


@dataclass
class DecoderConfig:
    image_channels: int = 256
    image_min_channels: int = 16
    text_layers: int = 2
    text_heads: int = 4
    text_dropout: float = 0.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 10
    scheduler_patience: int = 5
    scheduler_factor: float = 0.5
    plateau_threshold: float = 1e-4
    temperature: float = 0.07
    seed: int = 0
    device: str = "cpu"
    use_image: bool = True
    use_text: bool = True
    use_structured: bool = True
    use_contrastive: bool = True
    use_reconstruction: bool = True
    use_classification: bool = True
    learn_loss_weights: bool = True
    max_steps: int = 0  # 0 = unlimited


@dataclass
class DataConfig:
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    augment: bool = True


@dataclass
class EvalConfig:
    protocol: str = "paired"
    image_to_text: bool = False
    split: str = "test"
    repeats: int = 1
    batch_size: int = 32


@dataclass
class PathsConfig:
    manifest: str = ""
    templates: str = ""
    vocab: str = ""
    out: str = ""
    image_root: str = ""


SECTIONS = ("encoder", "fusion", "decoder", "train", "data", "eval", "paths")
MODEL_SECTIONS = ("encoder", "fusion", "decoder")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Small CPU-sized preset used by the synthetic data, tests and acceptance runs."""
        cfg = cls()
        cfg.encoder = EncoderConfig(
            model_dim=32, image_side=32, patch_size=8,
            vision_width=32, vision_depth=2, vision_heads=2, vision_freeze_depth=1,
            vocab_size=128, max_tokens=32, kept_tokens=8,
            text_width=32, text_depth=2, text_heads=2, text_freeze_depth=1,
            structured_hidden1=32, structured_hidden2=32,
        )
        cfg.fusion = FusionConfig(model_dim=32, layers=2, heads=4)
        cfg.decoder = DecoderConfig(image_channels=32, image_min_channels=8, text_layers=1, text_heads=2)
        cfg.train = TrainConfig(learning_rate=1e-3, max_epochs=75, early_stop_patience=75)
        for key, value in overrides.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in SECTIONS:
            sub = getattr(self, section)
            for f in fields(sub):
                out.append((f"{section}.{f.name}", getattr(sub, f.name)))
        return out

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, value) -> None:
        section, name = _split_key(key)
        sub = getattr(self, section)
        if name not in {f.name for f in fields(sub)}:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(type(sub)(), name)
        setattr(sub, name, _coerce(key, value, type(default)))

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS}
        )

    def model_items(self) -> dict[str, object]:
        return {k: v for k, v in self.items() if k.split(".")[0] in MODEL_SECTIONS}

    def validate(self) -> None:
        e, fu = self.encoder, self.fusion
        if e.model_dim != fu.model_dim:
            raise ConfigError("encoder.model_dim and fusion.model_dim differ")
        if e.image_side % e.patch_size:
            raise ConfigError("image_side must be divisible by patch_size")
        if e.kept_tokens > e.max_tokens:
            raise ConfigError("kept_tokens exceeds max_tokens")
        if e.max_tokens < 2:
            raise ConfigError("max_tokens must leave room for begin/end markers")
        if e.vision_freeze_depth > e.vision_depth or e.text_freeze_depth > e.text_depth:
            raise ConfigError("freeze depth exceeds backbone depth")
        if fu.model_dim % fu.heads:
            raise ConfigError("model_dim must be divisible by fusion heads")
        if e.backbone not in ("toy", "pretrained"):
            raise ConfigError(f"unknown backbone {e.backbone!r}")
        if self.eval.protocol not in ("paired", "isolated"):
            raise ConfigError(f"unknown protocol {self.eval.protocol!r}")
        t = self.train
        positive = [t.learning_rate >= 0, t.weight_decay >= 0, t.clip_norm > 0, t.batch_size > 0,
                    t.max_epochs > 0, t.early_stop_patience > 0, t.scheduler_patience > 0,
                    0 < t.scheduler_factor < 1, t.temperature > 0]
        if not all(positive):
            raise ConfigError("training hyperparameters must be positive")
        ratios = (self.data.train_ratio, self.data.val_ratio, self.data.test_ratio)
        if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = cls.from_text(path.read_text())
        # relative paths are taken relative to the config file
        for f in fields(cfg.paths):
            value = getattr(cfg.paths, f.name)
            if value and not Path(value).is_absolute():
                setattr(cfg.paths, f.name, str((path.parent / value).resolve()))
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _split_key(key: str) -> tuple[str, str]:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    return parts[0], parts[1]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, value, typ):
    if not isinstance(value, str):
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, typ):
            return value
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    try:
        if typ is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
