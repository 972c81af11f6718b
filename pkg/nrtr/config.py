"""Configuration models for every stage of the toolkit.

All configs are pydantic models so they can be read from and written to JSON
files, overridden from CLI flags, and hashed for checkpoint verification.
"""

import hashlib
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

Dims = tuple[int, int, int]
BackbonePreset = Literal["small", "resnet18", "resnet34", "resnet50"]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class LossWeights(_Frozen):
    """Weights of the matching cost and of the training loss."""

    w_cls: float = Field(default=1.0, ge=0)
    w_box: float = Field(default=5.0, ge=0)
    w_iou: float = Field(default=2.0, ge=0)
    no_object_weight: float = Field(default=0.1, ge=0)


class ModelConfig(_Frozen):
    """Architecture hyperparameters of the point-set transformer."""

    block_size: int = Field(default=64, gt=0)
    channels: int = Field(default=192, gt=0)
    downsample: int = Field(default=8, gt=1)
    backbone: BackbonePreset = "small"
    encoder_layers: int = Field(default=3, ge=1)
    decoder_layers: int = Field(default=3, ge=1)
    heads: int = Field(default=6, ge=1)
    mlp_hidden: int | None = Field(default=None, gt=0)
    head_hidden: int | None = Field(default=None, gt=0)
    num_queries: int = Field(default=64, ge=1)
    base_width: int | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ModelConfig":
        if self.downsample & (self.downsample - 1):
            raise ValueError(f"downsample={self.downsample} must be a power of two")
        if self.block_size % self.downsample:
            raise ValueError(
                f"block_size={self.block_size} must be divisible by "
                f"downsample={self.downsample}"
            )
        if self.channels % self.heads:
            raise ValueError(
                f"channels={self.channels} must be divisible by heads={self.heads}"
            )
        if self.channels % 6:
            raise ValueError(f"channels={self.channels} must be divisible by 6")
        return self

    @property
    def grid(self) -> int:
        """Edge length of the token grid."""
        return self.block_size // self.downsample

    @property
    def token_count(self) -> int:
        return self.grid**3

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden or 4 * self.channels

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.channels


class TrainConfig(_Frozen):
    """Optimization recipe: Adam, warmup + cosine schedule, two lr groups."""

    epochs: int = Field(default=100, ge=1)
    warmup_epochs: int = Field(default=10, ge=0)
    lr_transformer: float = Field(default=1e-4, gt=0)
    lr_backbone: float = Field(default=1e-5, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    decoupled_weight_decay: bool = True
    batch_size: int = Field(default=4, ge=1)
    steps_per_epoch: int | None = Field(default=None, ge=1)
    seed: int = 0
    loss: LossWeights = LossWeights()
    augment: bool = True
    empty_fg_threshold: float = Field(default=0.1, ge=0, le=1)
    empty_min_fraction: float = Field(default=0.001, ge=0, le=1)
    checkpoint_every: int = Field(default=1, ge=1)
    upsample: int = Field(default=1, ge=1)
    auto_upsample: bool = False
    model: ModelConfig = ModelConfig()

    @model_validator(mode="after")
    def _check_warmup(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs={self.warmup_epochs} must be smaller than "
                f"epochs={self.epochs}"
            )
        return self


class RenderSpec(_Frozen):
    """Image-formation parameters of the synthetic renderer."""

    dims: Dims = (64, 64, 64)
    foreground_intensity: float = 30000.0
    background_level: float = 2000.0
    noise_sd: float = Field(default=500.0, ge=0)
    psf_sigma: float = Field(default=1.0, ge=0)
    dtype: Literal["u8", "u16"] = "u16"

    @model_validator(mode="after")
    def _check_dims(self) -> "RenderSpec":
        if min(self.dims) <= 0:
            raise ValueError(f"dims={self.dims} must be positive")
        return self


class SynthSpec(_Frozen):
    """Random-walk forest generator parameters."""

    dims: Dims = (64, 64, 64)
    n_trees: int = Field(default=1, ge=0)
    nodes_per_tree: tuple[int, int] = (20, 40)
    radius_range: tuple[float, float] = (3.0, 6.0)
    branch_probability: float = Field(default=0.1, ge=0, le=1)
    step_range: tuple[float, float] = (2.0, 4.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthSpec":
        if min(self.dims) <= 0:
            raise ValueError(f"dims={self.dims} must be positive")
        for name in ("nodes_per_tree", "radius_range", "step_range"):
            low, high = getattr(self, name)
            if low <= 0 or low > high:
                raise ValueError(f"{name}=({low}, {high}) must be a positive range")
        return self


class SynthConfig(_Frozen):
    """A full synthetic dataset: generator, renderer and sample count."""

    synth: SynthSpec = SynthSpec()
    render: RenderSpec = RenderSpec()
    n_samples: int = Field(default=4, ge=0)
    test_fraction: float = Field(default=0.25, ge=0, le=1)

    @model_validator(mode="after")
    def _check_dims(self) -> "SynthConfig":
        if self.synth.dims != self.render.dims:
            raise ValueError(
                f"synth.dims={self.synth.dims} must equal render.dims={self.render.dims}"
            )
        return self


class ConnectConfig(_Frozen):
    """Inference and connectivity-construction parameters."""

    threshold: float = Field(default=0.5, gt=0, lt=1)
    merge_radius: float = Field(default=2.0, ge=0)
    tau: float = Field(default=3.0, gt=0)
    absolute_cap: float = Field(default=30.0, gt=0)
    block_size: int = Field(default=64, gt=0)
    overlap: int = Field(default=0, ge=0)
    upsample: int = Field(default=1, ge=1)
    auto_upsample: bool = True

    @model_validator(mode="after")
    def _check_overlap(self) -> "ConnectConfig":
        if self.overlap >= self.block_size:
            raise ValueError(
                f"overlap={self.overlap} must be smaller than block_size={self.block_size}"
            )
        return self


class VolumeHeader(_Frozen):
    """JSON header of the volume container."""

    dims: Dims
    dtype: Literal["u8", "u16"]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    order: Literal["x-fastest"] = "x-fastest"

    @model_validator(mode="after")
    def _check_dims(self) -> "VolumeHeader":
        if min(self.dims) <= 0:
            raise ValueError(f"dims={self.dims} must be positive")
        return self


class RunManifest(BaseModel):
    """Provenance record written next to every CLI output."""

    command: str
    config_path: str | None = None
    seed: int | None = None
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    version: str
    started_at: datetime
    wall_clock_seconds: float


def load_config(
    path: Path | None,
    model_cls: type[ModelT],
    overrides: dict[str, Any] | None = None,
) -> ModelT:
    """Load a JSON config file, apply non-None overrides, and validate.

    Args:
        path: JSON file, or None for defaults
        model_cls: pydantic model to validate against
        overrides: Top-level field values taking precedence over the file

    Returns:
        Validated config instance
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(model_cls, data)


def validate_config(model_cls: type[ModelT], data: dict[str, Any]) -> ModelT:
    """Validate raw data, turning pydantic errors into ConfigError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model_cls.__name__}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"invalid {model_cls.__name__}: {details}") from e


def config_hash(cfg: BaseModel) -> bytes:
    """SHA-256 digest of the canonical JSON form of a config."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def worker_count() -> int:
    """Internal parallelism cap taken from NRTR_THREADS."""
    raw = os.getenv("NRTR_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer NRTR_THREADS=%r", raw)
        return os.cpu_count() or 1
    return max(1, value)
