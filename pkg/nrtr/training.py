"""Optimization: warmup + cosine schedule, Adam, cube-symmetry augmentation and the train loop."""

import csv
import itertools
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cachetools import cached

from . import autodiff as ad
from .autodiff import Parameter
from .config import TrainConfig
from .errors import CheckpointError, EmptyDatasetError, NonFiniteLossError, ShapeError
from .matching import PointSet, set_loss
from .network import BACKBONE, TRANSFORMER, PointSetTransformer, save_checkpoint
from .swc import SwcForest, block_ground_truth, read_swc
from .synth import read_split
from .volume import (
    Volume,
    blockify,
    crop,
    extract_block,
    is_empty_block,
    load_volume,
    scale_to_unit,
    suggest_upsample_factor,
    upsample_trilinear,
)

logger = logging.getLogger(__name__)

SYMMETRY_COUNT = 48
LOG_COLUMNS = (
    "step",
    "epoch",
    "lr_transformer",
    "lr_backbone",
    "loss_total",
    "loss_cls",
    "loss_box",
    "loss_giou",
)
FINAL_CHECKPOINT = "model.bin"


def lr_at(step: int, total_steps: int, warmup_steps: int, base: float) -> float:
    """Linear warmup to ``base`` followed by cosine decay toward zero."""
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    """First and second moment estimates keyed by parameter name."""

    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lrs: dict[str, float],
    weight_decay: float = 0.0,
    decoupled: bool = True,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update of every parameter in place, using ``lrs[param.group]``.

    With ``decoupled`` the decay ``p -= lr * wd * p`` is applied on its own;
    otherwise ``wd * p`` is added to the gradient.

    Raises:
        ShapeError: A gradient or moment buffer does not match its parameter
    """
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if grad.shape != p.shape:
            raise ShapeError(f"{p.name}: gradient {grad.shape} != parameter {p.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{p.name}: optimizer state {m.shape} != parameter {p.shape}")
        lr = lrs[p.group]
        if weight_decay and not decoupled:
            grad = grad + weight_decay * p.data
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay and decoupled:
            p.data = p.data - lr * weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def save_train_state(path: Path, state: AdamState, epoch: int, step: int) -> None:
    """Persist Adam moments next to a checkpoint for bit-exact resume."""
    path = Path(path)
    arrays = {f"m/{k}": v for k, v in state.m.items()} | {f"v/{k}": v for k, v in state.v.items()}
    ad.write_parameter_store(path, arrays)
    meta = {"adam_t": state.t, "epoch": epoch, "step": step}
    path.with_name(path.name + ".json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def load_train_state(path: Path) -> tuple[AdamState, int, int]:
    """Returns (state, next epoch, next step)."""
    path = Path(path)
    _, arrays = ad.read_parameter_store(path)
    try:
        meta = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read train state metadata for {path}: {e}") from e
    state = AdamState(t=int(meta["adam_t"]))
    for key, value in arrays.items():
        kind, name = key.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = value
    return state, int(meta["epoch"]), int(meta["step"])


def state_path(checkpoint: Path) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".state")


@cached(cache={})
def cube_symmetries() -> tuple[tuple[tuple[int, int, int], tuple[bool, bool, bool]], ...]:
    """All 48 (axis permutation, axis flips) pairs; id = perm_index * 8 + flip_bits."""
    return tuple(
        (perm, (bool(bits & 1), bool(bits & 2), bool(bits & 4)))
        for perm in itertools.permutations(range(3))
        for bits in range(8)
    )


def _symmetry(symmetry_id: int) -> tuple[tuple[int, int, int], tuple[bool, bool, bool]]:
    if not 0 <= symmetry_id < SYMMETRY_COUNT:
        raise ValueError(f"symmetry id must be in [0, {SYMMETRY_COUNT}), got {symmetry_id}")
    perm, flips = cube_symmetries()[symmetry_id]
    return perm, flips  # type: ignore[return-value]


def transform_grid(grid: np.ndarray, symmetry_id: int) -> np.ndarray:
    """Apply a cube symmetry to a 3-D array indexed [x, y, z]."""
    perm, flips = _symmetry(symmetry_id)
    out = np.transpose(grid, perm)
    flipped = tuple(k for k in range(3) if flips[k])
    return np.flip(out, axis=flipped) if flipped else out


def transform_coordinates(
    coords: np.ndarray, symmetry_id: int, extent: Sequence[float] | float = 1.0
) -> np.ndarray:
    """Map (K, 3) coordinates in a box of ``extent`` exactly like :func:`transform_grid`."""
    perm, flips = _symmetry(symmetry_id)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    extent = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
    out = coords[:, list(perm)]
    size = extent[list(perm)]
    for k in range(3):
        if flips[k]:
            out[:, k] = size[k] - out[:, k]
    return out


def augment(
    block: np.ndarray, points: PointSet, symmetry_id: int
) -> tuple[np.ndarray, PointSet]:
    """Apply one of the 48 cube symmetries to a block and its normalized points.

    Raises:
        ShapeError: The block is not cubic
    """
    if block.ndim != 3 or len(set(block.shape)) != 1:
        raise ShapeError(f"augment needs a cubic block, got {block.shape}")
    moved = points.points.copy()
    moved[:, :3] = transform_coordinates(points.centers, symmetry_id)
    return (
        np.ascontiguousarray(transform_grid(block, symmetry_id)),
        PointSet(moved, points.is_prediction),
    )


@dataclass(frozen=True, eq=False)
class Sample:
    """One training pair: a normalized block and its ground-truth points."""

    block: np.ndarray
    points: PointSet
    source: str
    origin: tuple[int, int, int]


def training_upsample(forest: SwcForest, cfg: TrainConfig) -> int:
    """Magnification applied to one training volume and its ground truth.

    An explicit ``cfg.upsample`` wins; with ``cfg.auto_upsample`` the factor
    comes from :func:`~nrtr.volume.suggest_upsample_factor` on the forest.
    """
    if cfg.upsample > 1:
        return cfg.upsample
    if cfg.auto_upsample:
        return suggest_upsample_factor(forest)
    return 1


def magnify(volume: Volume, forest: SwcForest, factor: int) -> tuple[Volume, SwcForest]:
    """Upsample a volume and move its forest onto the magnified grid."""
    if factor == 1:
        return volume, forest
    scaled = forest.transform_centers(lambda c: c * factor).scale_radii(float(factor))
    return upsample_trilinear(volume, factor), scaled


def build_dataset(
    dataset_dir: Path, cfg: TrainConfig, names: Sequence[str] | None = None
) -> list[Sample]:
    """Crop every training volume into blocks and pair them with ground truth.

    Volumes are magnified first when the config asks for it. Blocks that are
    empty on the 16-bit scale, and blocks holding more nodes than the model
    has queries, are skipped.

    Raises:
        EmptyDatasetError: Nothing survives filtering
    """
    dataset_dir = Path(dataset_dir)
    size = cfg.model.block_size
    names = list(names) if names is not None else list(read_split(dataset_dir).train)
    samples: list[Sample] = []
    for name in names:
        forest = read_swc(dataset_dir / f"{name}.swc")
        factor = training_upsample(forest, cfg)
        volume, forest = magnify(load_volume(dataset_dir / name), forest, factor)
        if factor > 1:
            logger.info("Magnified %s by %d to %s", name, factor, volume.dims)
        for origin in blockify(volume, size):
            raw = crop(volume, origin, size)
            if is_empty_block(scale_to_unit(raw), cfg.empty_fg_threshold, cfg.empty_min_fraction):
                logger.info("Skipping empty block %s of %s", origin, name)
                continue
            points = block_ground_truth(forest, origin, size)
            if len(points) > cfg.model.num_queries:
                logger.warning(
                    "Skipping block %s of %s: %d nodes exceed %d queries",
                    origin,
                    name,
                    len(points),
                    cfg.model.num_queries,
                )
                continue
            samples.append(Sample(extract_block(volume, origin, size).data, points, name, origin))
    if not samples:
        raise EmptyDatasetError(f"no usable blocks in {dataset_dir}")
    logger.info("Assembled %d training blocks from %d volumes", len(samples), len(names))
    return samples


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float]
    state: AdamState


def _batch_indices(
    n: int, batch_size: int, seed: int, epoch: int, step_in_epoch: int
) -> np.ndarray:
    if n < batch_size:
        return np.random.default_rng([seed, epoch, step_in_epoch]).integers(0, n, batch_size)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order[(step_in_epoch * batch_size + np.arange(batch_size)) % n]


def _dump_batch(out_dir: Path, step: int, batch: list[Sample], blocks: np.ndarray) -> Path:
    path = out_dir / f"nonfinite_step{step:06d}.npz"
    np.savez(
        path,
        blocks=blocks,
        sources=np.array([s.source for s in batch]),
        origins=np.array([s.origin for s in batch]),
    )
    return path


def _truncate_log(path: Path, step: int) -> None:
    """Keep only the rows logged before ``step``."""
    if not path.exists():
        return
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    kept = [row for row in rows[1:] if row and int(row[0]) < step]
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(kept)
    logger.debug("Kept %d of %d logged steps in %s", len(kept), len(rows) - 1, path)


def train(
    model: PointSetTransformer,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    out_dir: Path,
    resume: Path | None = None,
) -> TrainResult:
    """Run the full optimization schedule and write checkpoints plus a CSV loss log.

    Every random choice derives from ``cfg.seed`` and the epoch or step
    number, so a run resumed from an epoch checkpoint continues exactly as
    the uninterrupted run would have.

    Raises:
        EmptyDatasetError: ``dataset`` is empty
        NonFiniteLossError: A step produced NaN or infinite loss
    """
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    batch_size = cfg.batch_size
    steps_per_epoch = cfg.steps_per_epoch or max(1, n // batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    params = model.parameters()

    state, start_epoch, step = AdamState(), 0, 0
    if resume is not None:
        state, start_epoch, step = load_train_state(state_path(resume))
        logger.info("Resuming at epoch %d, step %d", start_epoch, step)

    log_path = out_dir / "loss.csv"
    if resume is not None:
        _truncate_log(log_path, step)
    losses: list[float] = []
    with log_path.open("a" if resume is not None and log_path.exists() else "w", newline="") as f:
        writer = csv.writer(f)
        if f.tell() == 0:
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch, cfg.epochs):
            epoch_losses = []
            for s in range(steps_per_epoch):
                indices = _batch_indices(n, batch_size, cfg.seed, epoch, s)
                batch = [dataset[i] for i in indices]
                rng = np.random.default_rng([cfg.seed, step])
                symmetry_ids = (
                    rng.integers(0, SYMMETRY_COUNT, len(batch))
                    if cfg.augment
                    else np.zeros(len(batch), dtype=int)
                )
                pairs = [
                    augment(sample.block, sample.points, int(k))
                    for sample, k in zip(batch, symmetry_ids, strict=True)
                ]
                blocks = np.stack([block for block, _ in pairs])
                out = model(blocks[:, None])
                per_item = [set_loss(points, out[b], cfg.loss) for b, (_, points) in enumerate(pairs)]
                loss = per_item[0].total
                for item in per_item[1:]:
                    loss = loss + item.total
                loss = loss * (1.0 / len(per_item))
                value = loss.item()
                if not np.isfinite(value):
                    dump = _dump_batch(out_dir, step, batch, blocks)
                    raise NonFiniteLossError(step, [int(i) for i in indices], dump)

                model.zero_grad()
                ad.backward(loss)
                lrs = {
                    TRANSFORMER: lr_at(step, total_steps, warmup_steps, cfg.lr_transformer),
                    BACKBONE: lr_at(step, total_steps, warmup_steps, cfg.lr_backbone),
                }
                adam_step(params, state, lrs, cfg.weight_decay, cfg.decoupled_weight_decay)

                terms = {
                    key: sum(item.terms[key] for item in per_item) / len(per_item)
                    for key in ("cls", "box", "giou")
                }
                writer.writerow(
                    [
                        step,
                        epoch,
                        lrs[TRANSFORMER],
                        lrs[BACKBONE],
                        value,
                        terms["cls"],
                        terms["box"],
                        terms["giou"],
                    ]
                )
                logger.debug("step %d loss %.6f", step, value)
                losses.append(value)
                epoch_losses.append(value)
                step += 1
            f.flush()
            logger.info(
                "epoch %d/%d mean loss %.6f lr_transformer %.3e",
                epoch + 1,
                cfg.epochs,
                float(np.mean(epoch_losses)),
                lrs[TRANSFORMER],
            )
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                ckpt = out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.bin"
                save_checkpoint(model, ckpt)
                save_train_state(state_path(ckpt), state, epoch + 1, step)

    final = out_dir / FINAL_CHECKPOINT
    save_checkpoint(model, final)
    save_train_state(state_path(final), state, cfg.epochs, step)
    return TrainResult(final, log_path, losses, state)
