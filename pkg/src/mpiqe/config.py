"""Model/training configuration and the fixed scene and distortion taxonomies."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Literal

SCENE_NAMES = (
    "animal",
    "cityscape",
    "human",
    "indoor scene",
    "landscape",
    "night scene",
    "plant",
    "still-life",
    "others",
)

DISTORTION_NAMES = (
    "blur",
    "color-related",
    "contrast",
    "JPEG compression",
    "JPEG2000 compression",
    "noise",
    "over-exposure",
    "quantization",
    "under-exposure",
    "spatially-localized",
    "others",
)

NUM_SCENES = len(SCENE_NAMES)
NUM_DISTORTIONS = len(DISTORTION_NAMES)


class ConfigError(ValueError):
    """Raised for unparseable config files or invariant violations."""


@dataclass(frozen=True)
class Taxonomy:
    names: tuple[str, ...]
    kind: Literal["scene", "distortion"]

    def __post_init__(self):
        if self.kind not in ("scene", "distortion"):
            raise ValueError(f"unknown taxonomy kind {self.kind!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("taxonomy names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        """Case-insensitive lookup of a label's position."""
        lowered = [n.lower() for n in self.names]
        try:
            return lowered.index(name.strip().lower())
        except ValueError:
            raise KeyError(f"{name!r} is not a {self.kind} label") from None


def scene_taxonomy() -> Taxonomy:
    return Taxonomy(SCENE_NAMES, "scene")


def distortion_taxonomy() -> Taxonomy:
    return Taxonomy(DISTORTION_NAMES, "distortion")


@dataclass(frozen=True)
class ModelConfig:
    """All architectural and optimisation hyperparameters.

    Defaults are the desk-scale configuration: small enough that every
    gradient and invariant check runs on a CPU in seconds.
    """

    # architecture
    embed_dim: int = 64
    vision_dim: int = 96
    text_layers: int = 4
    vision_layers: int = 4
    decoder_layers: int = 3
    text_heads: int = 4
    vision_heads: int = 4
    decoder_heads: int = 4
    mlp_ratio: int = 4
    max_text_len: int = 32
    patch_size: int = 8
    image_size: int = 64
    text_prompt_len: int = 8
    visual_prompt_len: int = 4
    window_count: int = 2
    score_pooling: str = "mean"  # mean | concat

    # ablation switches
    visual_prompt_mode: str = "deep"  # deep | shallow | none
    use_scene_prompts: bool = True
    use_distortion_prompts: bool = True

    # objective
    temp_global: float = 0.01
    temp_spatial: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.5
    smooth_l1_beta: float = 1.0
    plain_l1: bool = False
    label_policy: str = "auto"  # auto | manifest | pseudo | off

    # optimisation
    lr: float = 2e-3
    warmup_epochs: int = 5
    total_epochs: int = 200
    batch_size: int = 16
    crops_per_image: int = 4
    crop_size: int = 48
    grad_clip: float = 1.0
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        validate(self)

    @property
    def grid_side(self) -> int:
        """Patch grid side length of a crop fed to the vision encoder."""
        return self.crop_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_config(self).encode("utf-8")).hexdigest()[:16]


_POSITIVE_INTS = (
    "embed_dim", "vision_dim", "text_layers", "vision_layers", "decoder_layers",
    "text_heads", "vision_heads", "decoder_heads", "mlp_ratio", "max_text_len",
    "patch_size", "image_size", "text_prompt_len", "window_count",
    "total_epochs", "batch_size", "crops_per_image", "crop_size",
)


def validate(cfg: ModelConfig) -> None:
    for name in _POSITIVE_INTS:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.visual_prompt_len < 0:
        raise ConfigError("visual_prompt_len must be non-negative")
    if cfg.warmup_epochs < 0 or cfg.warmup_epochs > cfg.total_epochs:
        raise ConfigError("warmup_epochs must lie in [0, total_epochs]")
    if not cfg.temp_global > 0:
        raise ConfigError("temp_global must be positive")
    if not cfg.temp_spatial > 0:
        raise ConfigError("temp_spatial must be positive")
    for name in ("lambda1", "lambda2"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if not cfg.smooth_l1_beta > 0:
        raise ConfigError("smooth_l1_beta must be positive")
    if not cfg.lr > 0:
        raise ConfigError("lr must be positive")
    if cfg.image_size % cfg.patch_size:
        raise ConfigError("image_size must be divisible by patch_size")
    if (cfg.image_size // cfg.patch_size) % cfg.window_count:
        raise ConfigError("image_size/patch_size must be divisible by window_count")
    if cfg.crop_size > cfg.image_size:
        raise ConfigError("crop_size must not exceed image_size")
    if cfg.crop_size % cfg.patch_size:
        raise ConfigError("crop_size must be divisible by patch_size")
    if (cfg.crop_size // cfg.patch_size) % cfg.window_count:
        raise ConfigError("crop_size/patch_size must be divisible by window_count")
    for dim, heads in (("embed_dim", "text_heads"), ("vision_dim", "vision_heads"),
                       ("embed_dim", "decoder_heads")):
        if getattr(cfg, dim) % getattr(cfg, heads):
            raise ConfigError(f"{heads} must divide {dim}")
    if cfg.score_pooling not in ("mean", "concat"):
        raise ConfigError("score_pooling must be 'mean' or 'concat'")
    if cfg.visual_prompt_mode not in ("deep", "shallow", "none"):
        raise ConfigError("visual_prompt_mode must be 'deep', 'shallow' or 'none'")
    if cfg.label_policy not in ("auto", "manifest", "pseudo", "off"):
        raise ConfigError("label_policy must be one of auto, manifest, pseudo, off")
    if not 0 <= cfg.val_frac < 1:
        raise ConfigError("val_frac must lie in [0, 1)")
    if not cfg.use_scene_prompts and not cfg.use_distortion_prompts:
        raise ConfigError("at least one of the text prompt branches must be enabled")


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def full_scale_config(dataset: str | None = None, **overrides) -> ModelConfig:
    """ViT-B/16-shaped preset with the published training schedule."""
    lambda2 = 0.1 if dataset is not None and dataset.lower() in ("live", "csiq") else 0.5
    batch = 64
    if dataset is not None and dataset.lower() in ("live", "csiq", "bid"):
        batch = 32
    params = dict(
        embed_dim=512,
        vision_dim=768,
        text_layers=12,
        vision_layers=12,
        decoder_layers=3,
        text_heads=8,
        vision_heads=12,
        decoder_heads=8,
        max_text_len=77,
        patch_size=16,
        image_size=224,
        text_prompt_len=8,
        visual_prompt_len=4,
        window_count=7,
        lambda1=1.0,
        lambda2=lambda2,
        lr=3e-5,
        warmup_epochs=5,
        total_epochs=30,
        batch_size=batch,
        crops_per_image=8,
        crop_size=224,
    )
    params.update(overrides)
    return ModelConfig(**params)


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_config(text: str) -> ModelConfig:
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return ModelConfig(**values)


def load_config(path: str | Path) -> ModelConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dumps_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")
