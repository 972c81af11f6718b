"""The point-set transformer: 3D residual backbone, pyramid fusion, encoder-decoder and heads.

A block of shape (B, 1, S, S, S) is reduced by the backbone to a grid of
``S / downsample`` voxels per axis with ``channels`` features, flattened into
tokens (z fastest), summed with a fixed sinusoidal encoding and passed through
the encoder. The decoder refines ``num_queries`` learned queries against the
encoder memory and the heads turn each query into ``(a, b, c, r, cls)``.
"""

import json
import logging
from collections.abc import Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from cachetools import LRUCache, cached

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .config import ModelConfig, config_hash, validate_config
from .errors import CheckpointError, ConfigError, ConfigMismatchError, ShapeError
from .matching import PointSet
from .volume import Block

logger = logging.getLogger(__name__)

BACKBONE = "backbone"
TRANSFORMER = "transformer"

# preset -> (blocks per stage, block kind, default base width)
PRESETS: dict[str, tuple[tuple[int, ...], str, int]] = {
    "small": ((2, 2, 2), "basic", 16),
    "resnet18": ((2, 2, 2, 2), "basic", 32),
    "resnet34": ((3, 4, 6, 3), "basic", 32),
    "resnet50": ((3, 4, 6, 3), "bottleneck", 32),
}
BOTTLENECK_EXPANSION = 4
ENCODING_BASE = 10000.0


class Conv3d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: int,
        group: str,
        stride: int = 1,
        dtype: Any = np.float32,
    ):
        fan_in = in_channels * kernel**3
        shape = (out_channels, in_channels, kernel, kernel, kernel)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), group, dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), group, dtype=dtype)
        self.stride = stride
        self.padding = kernel // 2
        self.method = "direct"

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.method)


class Linear(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_features: int,
        out_features: int,
        group: str = TRANSFORMER,
        dtype: Any = np.float32,
    ):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(
            rng.uniform(-limit, limit, (in_features, out_features)), group, dtype=dtype
        )
        self.bias = Parameter(np.zeros(out_features), group, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


def channel_norm(x: Tensor) -> Tensor:
    return ad.layernorm(x, axis=1)


class BasicBlock(Module):
    """Two 3x3x3 convolutions with a residual shortcut."""

    def __init__(
        self, rng: np.random.Generator, in_ch: int, width: int, stride: int, dtype: Any
    ):
        self.conv1 = Conv3d(rng, in_ch, width, 3, BACKBONE, stride, dtype)
        self.conv2 = Conv3d(rng, width, width, 3, BACKBONE, 1, dtype)
        self.shortcut = (
            Conv3d(rng, in_ch, width, 1, BACKBONE, stride, dtype)
            if stride != 1 or in_ch != width
            else None
        )
        self.out_channels = width

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.relu(channel_norm(self.conv1(x)))
        out = channel_norm(self.conv2(out))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ad.relu(out + skip)


class Bottleneck(Module):
    """1x1 reduce, 3x3x3, 1x1 expand, with a residual shortcut."""

    def __init__(
        self, rng: np.random.Generator, in_ch: int, width: int, stride: int, dtype: Any
    ):
        out_ch = width * BOTTLENECK_EXPANSION
        self.reduce = Conv3d(rng, in_ch, width, 1, BACKBONE, 1, dtype)
        self.conv = Conv3d(rng, width, width, 3, BACKBONE, stride, dtype)
        self.expand = Conv3d(rng, width, out_ch, 1, BACKBONE, 1, dtype)
        self.shortcut = (
            Conv3d(rng, in_ch, out_ch, 1, BACKBONE, stride, dtype)
            if stride != 1 or in_ch != out_ch
            else None
        )
        self.out_channels = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.relu(channel_norm(self.reduce(x)))
        out = ad.relu(channel_norm(self.conv(out)))
        out = channel_norm(self.expand(out))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ad.relu(out + skip)


class Backbone(Module):
    """Stride-2 stem followed by residual stages at strides 2, 4, 8 (and 16)."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, dtype: Any):
        depths, kind, default_width = PRESETS[cfg.backbone]
        width = cfg.base_width or default_width
        block_cls = Bottleneck if kind == "bottleneck" else BasicBlock
        self.stem = Conv3d(rng, 1, width, 3, BACKBONE, 2, dtype)
        self.stages: list[list[Module]] = []
        self.strides: list[int] = []
        self.stage_channels: list[int] = []
        in_ch, stride = width, 2
        for index, depth in enumerate(depths):
            stage_width = width * 2**index
            first_stride = 1 if index == 0 else 2
            stride *= first_stride
            blocks: list[Module] = []
            for b in range(depth):
                block = block_cls(rng, in_ch, stage_width, first_stride if b == 0 else 1, dtype)
                in_ch = block.out_channels
                blocks.append(block)
            self.stages.append(blocks)
            self.strides.append(stride)
            self.stage_channels.append(in_ch)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield from self.stem.named_parameters(f"{prefix}stem.")
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stages.{s}.{b}.")

    def __call__(self, x: Tensor) -> list[Tensor]:
        out = ad.relu(channel_norm(self.stem(x)))
        features = []
        for blocks in self.stages:
            for block in blocks:
                out = block(out)  # type: ignore[operator]
            features.append(out)
        return features


def avg_pool(x: Tensor, factor: int) -> Tensor:
    b, c, d, h, w = x.shape
    grouped = ad.reshape(x, (b, c, d // factor, factor, h // factor, factor, w // factor, factor))
    return ad.mean(grouped, axis=(3, 5, 7))


class PyramidFusion(Module):
    """Lateral 1x1 projections of every stage, resampled to the token stride and summed."""

    def __init__(
        self,
        rng: np.random.Generator,
        stage_channels: Sequence[int],
        strides: Sequence[int],
        target_stride: int,
        channels: int,
        dtype: Any,
    ):
        self.laterals = [Conv3d(rng, ch, channels, 1, BACKBONE, 1, dtype) for ch in stage_channels]
        self.smooth = Conv3d(rng, channels, channels, 3, BACKBONE, 1, dtype)
        self.strides = list(strides)
        self.target = target_stride

    def __call__(self, features: Sequence[Tensor]) -> Tensor:
        fused: Tensor | None = None
        for lateral, stride, feature in zip(self.laterals, self.strides, features, strict=True):
            level = lateral(feature)
            if stride < self.target:
                level = avg_pool(level, self.target // stride)
            elif stride > self.target:
                level = ad.upsample_nearest(level, stride // self.target)
            fused = level if fused is None else fused + level
        assert fused is not None
        return self.smooth(fused)


@cached(cache=LRUCache(maxsize=16))
def _encoding_table(grid: int, channels: int) -> np.ndarray:
    per_axis = channels // 3
    freqs = 1.0 / ENCODING_BASE ** (np.arange(0, per_axis, 2) / per_axis)
    index = np.arange(grid, dtype=np.float64)[:, None] * freqs[None, :]
    axis_table = np.empty((grid, per_axis))
    axis_table[:, 0::2] = np.sin(index)
    axis_table[:, 1::2] = np.cos(index)
    xs, ys, zs = np.meshgrid(np.arange(grid), np.arange(grid), np.arange(grid), indexing="ij")
    table = np.concatenate(
        [axis_table[xs.ravel()], axis_table[ys.ravel()], axis_table[zs.ravel()]], axis=1
    )
    table.setflags(write=False)
    return table


def positional_encoding(cfg: ModelConfig) -> np.ndarray:
    """Fixed (grid**3, C) encoding; per axis C/3 interleaved sin/cos channels.

    Row order matches token order: x slowest, z fastest.
    """
    return _encoding_table(cfg.grid, cfg.channels)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, channels: int, heads: int, dtype: Any):
        self.heads = heads
        self.query = Linear(rng, channels, channels, dtype=dtype)
        self.key = Linear(rng, channels, channels, dtype=dtype)
        self.value = Linear(rng, channels, channels, dtype=dtype)
        self.out = Linear(rng, channels, channels, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, c // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor) -> Tensor:
        q = self._split(self.query(query))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        attended = ad.scaled_dot_product_attention(q, k, v)
        b, _, n, _ = attended.shape
        merged = ad.reshape(ad.transpose(attended, (0, 2, 1, 3)), (b, n, query.shape[-1]))
        return self.out(merged)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, channels: int, hidden: int, dtype: Any):
        self.fc1 = Linear(rng, channels, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention and MLP, each with a residual connection."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, dtype: Any):
        self.attn = MultiHeadAttention(rng, cfg.channels, cfg.heads, dtype)
        self.mlp = MLP(rng, cfg.channels, cfg.mlp_width, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.layernorm(x)
        x = x + self.attn(h, h)
        return x + self.mlp(ad.layernorm(x))


class DecoderLayer(Module):
    """Pre-norm self-attention, MLP, cross-attention to the memory, MLP."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, dtype: Any):
        self.self_attn = MultiHeadAttention(rng, cfg.channels, cfg.heads, dtype)
        self.mlp1 = MLP(rng, cfg.channels, cfg.mlp_width, dtype)
        self.cross_attn = MultiHeadAttention(rng, cfg.channels, cfg.heads, dtype)
        self.mlp2 = MLP(rng, cfg.channels, cfg.mlp_width, dtype)

    def __call__(self, target: Tensor, memory: Tensor) -> Tensor:
        h = ad.layernorm(target)
        target = target + self.self_attn(h, h)
        target = target + self.mlp1(ad.layernorm(target))
        target = target + self.cross_attn(ad.layernorm(target), memory)
        return target + self.mlp2(ad.layernorm(target))


class PointHead(Module):
    """3-layer MLP for (a, b, c, r) and a linear classifier, all through sigmoid."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, dtype: Any):
        hidden = cfg.head_width
        self.box1 = Linear(rng, cfg.channels, hidden, dtype=dtype)
        self.box2 = Linear(rng, hidden, hidden, dtype=dtype)
        self.box3 = Linear(rng, hidden, 4, dtype=dtype)
        self.cls = Linear(rng, cfg.channels, 1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        geometry = self.box3(ad.relu(self.box2(ad.relu(self.box1(x)))))
        return ad.sigmoid(ad.concat([geometry, self.cls(x)], axis=-1))


class PointSetTransformer(Module):
    """Full model; calling it maps (B, 1, S, S, S) blocks to (B, N, 5) points."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: Any = np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.backbone = Backbone(rng, cfg, dtype)
        self.fusion = PyramidFusion(
            rng,
            self.backbone.stage_channels,
            self.backbone.strides,
            cfg.downsample,
            cfg.channels,
            dtype,
        )
        self.encoder = [EncoderLayer(rng, cfg, dtype) for _ in range(cfg.encoder_layers)]
        self.decoder = [DecoderLayer(rng, cfg, dtype) for _ in range(cfg.decoder_layers)]
        self.queries = Parameter(
            rng.normal(0.0, 1.0, (cfg.num_queries, cfg.channels)), TRANSFORMER, dtype=dtype
        )
        self.head = PointHead(rng, cfg, dtype)

    def tokens(self, x: Tensor) -> Tensor:
        """Backbone features as (B, n, C) tokens plus the positional encoding."""
        fused = self.fusion(self.backbone(x))
        b, c = fused.shape[:2]
        seq = ad.transpose(ad.reshape(fused, (b, c, -1)), (0, 2, 1))
        return seq + positional_encoding(self.cfg).astype(self.dtype)

    def encode(self, tokens: Tensor) -> Tensor:
        for layer in self.encoder:
            tokens = layer(tokens)
        return ad.layernorm(tokens)

    def decode(self, memory: Tensor) -> Tensor:
        b = memory.shape[0]
        target = ad.add(np.zeros((b, *self.queries.shape), dtype=self.dtype), self.queries)
        for layer in self.decoder:
            target = layer(target, memory)
        return ad.layernorm(target)

    def __call__(self, x: Tensor | np.ndarray) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        size = self.cfg.block_size
        if x.ndim != 5 or x.shape[1:] != (1, size, size, size):
            raise ShapeError(f"expected input (B, 1, {size}, {size}, {size}), got {x.shape}")
        return self.head(self.decode(self.encode(self.tokens(x))))


def build_model(cfg: ModelConfig, seed: int = 0, dtype: Any = np.float32) -> PointSetTransformer:
    """Construct a model with deterministic initialization from ``seed``.

    Raises:
        ConfigError: The preset cannot be applied to ``cfg`` or the
            initialization produced coincident queries or encodings
    """
    depths = PRESETS[cfg.backbone][0]
    deepest = 2 ** len(depths)
    if cfg.block_size % max(deepest, cfg.downsample):
        raise ConfigError(
            f"block_size={cfg.block_size} must be divisible by the backbone stride {deepest}"
        )
    model = PointSetTransformer(cfg, seed, dtype)
    seen: set[int] = set()
    for name, param in model.named_parameters():
        if id(param) in seen:
            raise ConfigError(f"parameter {name} is registered twice")
        seen.add(id(param))
        param.name = name
    if len(np.unique(model.queries.data, axis=0)) != cfg.num_queries:
        raise ConfigError("query embeddings are not pairwise distinct")
    if len(np.unique(positional_encoding(cfg), axis=0)) != cfg.token_count:
        raise ConfigError("positional encodings collide on the token grid")
    logger.debug(
        "Built %s model with %d parameters (seed %d)", cfg.backbone, parameter_count(model), seed
    )
    return model


def parameter_count(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())


def parameter_groups(model: Module) -> dict[str, list[Parameter]]:
    groups: dict[str, list[Parameter]] = {BACKBONE: [], TRANSFORMER: []}
    for p in model.parameters():
        groups[p.group].append(p)
    return groups


def forward(model: PointSetTransformer, block: Block) -> PointSet:
    """Predict the N points of one normalized block."""
    return predict_points(model, block.data[None])[0]


def predict_points(model: PointSetTransformer, blocks: np.ndarray) -> list[PointSet]:
    """Predict point sets for a (B, S, S, S) stack of normalized blocks."""
    out = model(np.asarray(blocks, dtype=model.dtype)[:, None])
    return [PointSet.prediction(points.astype(np.float64)) for points in out.data]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model: PointSetTransformer, path: Path) -> int:
    """Write the parameter store and its JSON config sidecar; returns store size in bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.data for name, p in model.named_parameters()}
    size = ad.write_parameter_store(path, arrays, config_hash(model.cfg))
    _sidecar(path).write_text(model.cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("Saved checkpoint %s (%d bytes)", path, size)
    return size


def load_checkpoint(path: Path, cfg: ModelConfig | None = None) -> PointSetTransformer:
    """Rebuild a model from a checkpoint, verifying its config hash.

    Args:
        path: Parameter store written by :func:`save_checkpoint`
        cfg: Expected config; read from the sidecar when omitted

    Raises:
        ConfigMismatchError: The checkpoint was written for another config
        CheckpointError: The store is truncated or its tensors do not fit
    """
    path = Path(path)
    if cfg is None:
        try:
            cfg = validate_config(ModelConfig, json.loads(_sidecar(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read config sidecar of {path}: {e}") from e
    digest, arrays = ad.read_parameter_store(path)
    if digest != config_hash(cfg):
        raise ConfigMismatchError(f"checkpoint {path} was written for a different model config")
    model = build_model(cfg)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"checkpoint {path} parameter names differ: {missing[:5]}")
    for name, param in params.items():
        if arrays[name].shape != param.shape:
            raise CheckpointError(
                f"{name}: stored shape {arrays[name].shape} != model shape {param.shape}"
            )
        param.data = arrays[name].astype(model.dtype)
    return model
