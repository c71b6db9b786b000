"""Run configuration: flat key=value sections, file + CLI overrides."""

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .cameras import DEFAULT_FOV_Y
from .container import ContainerConfig
from .transformer import StarConfig
from .vqvae import VqConfig


@dataclass
class SceneConfig:
    t_frames: int = 4
    views: int = 4
    image_size: int = 32
    n_objects: int = 1
    radius: float = 2.0
    elevation: float = 0.25
    fov_y: float = DEFAULT_FOV_Y

    def __post_init__(self):
        if self.t_frames < 1 or self.views < 1:
            raise ValueError("t_frames and views must be >= 1")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0 < self.fov_y < math.pi):
            raise ValueError("fov_y must lie in (0, pi)")


@dataclass
class StarArch:
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 768
    mlp_hidden: int = 256
    text_buckets: int = 512
    container_mode: str = "kv"


@dataclass
class SamplingConfig:
    temperature: float = 1.0
    top_k: int = 50


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    log_every: int = 25
    codebook_epoch: int = 50  # steps per dead-entry sweep


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    vqvae: VqConfig = field(default_factory=VqConfig)
    star: StarArch = field(default_factory=StarArch)
    container: ContainerConfig = field(default_factory=ContainerConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.vqvae.image_size != self.scene.image_size:
            self.vqvae = dataclasses.replace(self.vqvae, image_size=self.scene.image_size)

    def star_config(self) -> StarConfig:
        """Assemble the full transformer config from scene/vq/arch sections."""
        return StarConfig(
            embed_dim=self.star.embed_dim,
            n_layers=self.star.n_layers,
            n_heads=self.star.n_heads,
            vocab_size=self.vqvae.codebook_size,
            t_groups=self.scene.t_frames,
            n_views=self.scene.views,
            latent_h=self.vqvae.latent_size,
            latent_w=self.vqvae.latent_size,
            n_chunks=self.vqvae.n_chunks,
            max_seq_len=self.star.max_seq_len,
            mlp_hidden=self.star.mlp_hidden,
            text_buckets=self.star.text_buckets,
            temperature=self.sampling.temperature,
            top_k=self.sampling.top_k,
            container=dataclasses.replace(self.container),
            container_mode=self.star.container_mode,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sections(self) -> dict:
        return {
            "scene": self.scene,
            "vqvae": self.vqvae,
            "star": self.star,
            "container": self.container,
            "sampling": self.sampling,
            "train": self.train,
        }


def _convert(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def apply_override(cfg: RunConfig, spec: str) -> None:
    """Apply one 'section.key=value' override in place."""
    if "=" not in spec:
        raise ValueError(f"override {spec!r} is not of the form section.key=value")
    dotted, value = spec.split("=", 1)
    if "." not in dotted:
        raise ValueError(f"override key {dotted!r} must be section.key")
    section, key = dotted.split(".", 1)
    sections = cfg.sections()
    if section not in sections:
        raise ValueError(f"unknown config section {section!r}")
    target = sections[section]
    if not hasattr(target, key):
        raise ValueError(f"unknown config key {key!r} in section [{section}]")
    current = getattr(target, key)
    setattr(target, key, _convert(value, current))


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an INI-style file plus key=value overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no config file at {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            for key, value in parser.items(section):
                apply_override(cfg, f"{section}.{key}={value}")
    for spec in overrides:
        apply_override(cfg, spec)
    # re-validate cross-section constraints
    cfg.__post_init__()
    cfg.scene.__post_init__()
    cfg.vqvae.__post_init__()
    return cfg
