"""
Pydantic schemas for every configuration block of a run
"""
from enum import Enum
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _pair(value):
    """Accept "a,b" strings from flat config files"""
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    return value


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class VariantTag(str, Enum):
    SEQUENTIAL_RELAY = "SequentialRelay"
    PARALLEL_RELAY = "ParallelRelay"
    FEWER_BLOCKS = "FewerBlocks"
    TOKEN_CONCAT = "TokenConcat"
    DECISION_FUSION = "DecisionFusion"
    REGISTERS_ONLY = "RegistersOnly"
    LOCAL_ONLY = "LocalOnly"
    GLOBAL_ONLY = "GlobalOnly"


class RelayVariant(BaseModel):
    """Which forward strategy to run; text form is `Tag` or `FewerBlocks:<keep>`"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tag: VariantTag
    keep: Optional[int] = None

    @model_validator(mode="after")
    def _check_keep(self):
        if self.tag == VariantTag.FEWER_BLOCKS:
            if self.keep is None or self.keep < 1:
                raise ValueError("FewerBlocks needs keep >= 1")
        elif self.keep is not None:
            raise ValueError(f"{self.tag.value} takes no keep argument")
        return self

    @classmethod
    def parse(cls, text: "str | RelayVariant") -> "RelayVariant":
        if isinstance(text, RelayVariant):
            return text
        name, _, arg = str(text).strip().partition(":")
        return cls(tag=VariantTag(name), keep=int(arg) if arg else None)

    def __str__(self):
        return f"{self.tag.value}:{self.keep}" if self.keep is not None else self.tag.value

    @property
    def uses_local(self) -> bool:
        return self.tag != VariantTag.GLOBAL_ONLY

    @property
    def uses_global(self) -> bool:
        return self.tag not in (VariantTag.LOCAL_ONLY, VariantTag.REGISTERS_ONLY)

    @property
    def uses_relays(self) -> bool:
        return self.tag in (
            VariantTag.SEQUENTIAL_RELAY,
            VariantTag.PARALLEL_RELAY,
            VariantTag.FEWER_BLOCKS,
        )


class ViTConfig(StrictModel):
    depth: int = Field(4, ge=1)
    width: int = Field(64, ge=4)
    heads: int = Field(4, ge=1)
    patch_size: int = Field(8, ge=1)
    in_channels: int = Field(3, ge=1)
    num_classes: int = Field(4, ge=2)
    relay_count: int = Field(4, ge=0)
    share_projector: bool = False
    mlp_ratio: float = Field(4.0, gt=0)
    local_size: int = Field(64, ge=1)
    global_extent: int = Field(256, ge=1)
    down_factor: int = Field(4, ge=1)
    dtype: str = "float32"
    ln_eps: float = 1e-6
    init_std: float = 0.02

    @field_validator("dtype")
    @classmethod
    def _dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {value}")
        return value

    @model_validator(mode="after")
    def _geometry(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise ValueError(f"width {self.width} not divisible by 4 (2D sinusoidal table)")
        if self.local_size % self.patch_size:
            raise ValueError(f"local_size {self.local_size} not divisible by patch_size {self.patch_size}")
        if self.global_extent % self.down_factor:
            raise ValueError(f"global_extent {self.global_extent} not divisible by down_factor {self.down_factor}")
        if self.global_extent // self.down_factor != self.local_size:
            raise ValueError(
                f"global window {self.global_extent}↓{self.down_factor} must process at "
                f"local_size {self.local_size} so both scales have equal token counts"
            )
        return self

    @property
    def grid(self) -> int:
        return self.local_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.width))

    @classmethod
    def vit_s(cls, **overrides) -> "ViTConfig":
        """ViT-S at 256 px local + 1024↓4 global, 19 classes"""
        base = dict(
            depth=12, width=384, heads=6, patch_size=16, in_channels=3, num_classes=19,
            relay_count=4, share_projector=False, local_size=256, global_extent=1024,
            down_factor=4,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ViTConfig":
        """gradient-check scale: local 8x8, global 32↓4"""
        base = dict(
            depth=2, width=8, heads=2, patch_size=2, in_channels=3, num_classes=3,
            relay_count=2, share_projector=False, local_size=8, global_extent=32,
            down_factor=4, dtype="float64",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ViTConfig":
        """synthetic context-cue experiment scale"""
        base = dict(
            depth=4, width=64, heads=4, patch_size=8, in_channels=3, num_classes=4,
            relay_count=4, share_projector=False, local_size=64, global_extent=256,
            down_factor=4,
        )
        base.update(overrides)
        return cls(**base)


class SamplerConfig(StrictModel):
    s: int = Field(64, ge=2)
    g: int = Field(4, ge=1)
    oob_reject_fraction: float = Field(0.8, ge=0, le=1)
    scale_range: Tuple[float, float] = (0.5, 2.0)
    rotation_range_deg: Tuple[float, float] = (-90.0, 90.0)
    aug_prob: float = Field(0.5, ge=0, le=1)
    augment: bool = True
    max_attempts: int = Field(100, ge=1)
    seed: int = 0

    @field_validator("scale_range", "rotation_range_deg", mode="before")
    @classmethod
    def _ranges(cls, value):
        return _pair(value)

    @field_validator("s")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"window size s={value} must be even")
        return value


class OptimConfig(StrictModel):
    lr0: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    warmup_fraction: float = 0.05
    plateau_factor: float = Field(0.5, gt=0, lt=1)
    plateau_patience: int = Field(3, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    steps_total: int = Field(2000, ge=1)
    batch: int = Field(16, ge=1)
    seed: int = 0
    eval_every: int = Field(100, ge=1)
    log_every: int = Field(10, ge=1)

    @field_validator("betas", mode="before")
    @classmethod
    def _betas(cls, value):
        return _pair(value)

    @field_validator("warmup_fraction")
    @classmethod
    def _warmup(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {value}")
        return value

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.steps_total))


class LossWeights(StrictModel):
    w_loc: float = Field(1.0, ge=0)
    w_glo: float = Field(0.1, ge=0)
    w_con: float = Field(0.1, ge=0)
    stop_gradient_consistency: bool = True


# label value excluded from every loss and metric
IGNORE = 255

DEFAULT_CLASS_TABLE: Dict[str, int] = {
    "stripes_h:warm": 1,
    "stripes_h:cold": 2,
    "stripes_v:warm": 3,
    "stripes_v:cold": 3,
}


class SynthSpec(StrictModel):
    """Context-cue scenes: local texture x distant beacon colour decides the class"""

    num_classes: int = Field(4, ge=2)
    scene_size: int = Field(1024, ge=16)
    cell_size: int = Field(256, ge=8)
    texture_size: int = Field(48, ge=2)
    stripe_period: int = Field(4, ge=2)
    beacon_radius: int = Field(88, ge=1)
    beacon_width: int = Field(8, ge=1)
    beacon_prior: float = Field(0.5, gt=0, lt=1)
    texture_prior: float = Field(0.5, gt=0, lt=1)
    noise: float = Field(0.05, ge=0)
    train_scenes: int = Field(64, ge=0)
    val_scenes: int = Field(16, ge=0)
    test_scenes: int = Field(16, ge=0)
    class_table: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_CLASS_TABLE))

    @model_validator(mode="after")
    def _layout(self):
        outer = self.texture_size + 2 * (self.beacon_radius + self.beacon_width)
        if outer > self.cell_size:
            raise ValueError(f"texture + beacon ring ({outer}px) does not fit cell_size {self.cell_size}")
        if set(self.class_table) != set(DEFAULT_CLASS_TABLE):
            missing = sorted(set(DEFAULT_CLASS_TABLE) - set(self.class_table))
            unknown = sorted(set(self.class_table) - set(DEFAULT_CLASS_TABLE))
            raise ValueError(f"class_table needs every texture:beacon key; missing {missing}, unknown {unknown}")
        if any(not 0 < c < self.num_classes for c in self.class_table.values()):
            raise ValueError("class_table values must be foreground classes 1..K-1")
        return self


class PathsConfig(StrictModel):
    data: str = "data/synth"
    out: str = "runs/default"


class RunConfig(StrictModel):
    """Everything one command needs; loaded from a flat key=value file"""

    vit: ViTConfig = Field(default_factory=ViTConfig.desk)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    variant: RelayVariant = Field(default_factory=lambda: RelayVariant(tag=VariantTag.SEQUENTIAL_RELAY))
    overlap: float = Field(0.0, ge=0, lt=1)
    seed: int = 0
    threads: int = Field(1, ge=1)

    @field_validator("variant", mode="before")
    @classmethod
    def _variant(cls, value):
        return RelayVariant.parse(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _consistent(self):
        if self.sampler.s != self.vit.local_size or self.sampler.g != self.vit.down_factor:
            raise ValueError(
                f"sampler window {self.sampler.s}/g={self.sampler.g} disagrees with "
                f"vit local_size {self.vit.local_size}/down_factor {self.vit.down_factor}"
            )
        if self.variant.tag == VariantTag.FEWER_BLOCKS and self.variant.keep > self.vit.depth:
            raise ValueError(f"FewerBlocks keep={self.variant.keep} exceeds depth {self.vit.depth}")
        if self.vit.num_classes != self.synth.num_classes:
            raise ValueError(
                f"vit.num_classes {self.vit.num_classes} != synth.num_classes {self.synth.num_classes}"
            )
        return self
