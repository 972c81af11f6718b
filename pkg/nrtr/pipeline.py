"""End-to-end runs behind the CLI commands: synth, train, infer and eval."""

import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import (
    ConnectConfig,
    Dims,
    RunManifest,
    SynthConfig,
    TrainConfig,
    load_config,
    worker_count,
)
from .connect import reconstruct
from .errors import SwcParseError, SwcStructureError
from .matching import PointSet
from .metrics import ScoreReport, evaluate
from .network import PointSetTransformer, build_model, load_checkpoint, predict_points
from .swc import SwcForest, read_swc, save_swc, validate
from .synth import DatasetIndex, generate_dataset
from .training import TrainResult, build_dataset, train
from .volume import (
    Volume,
    blockify,
    extract_block,
    load_volume,
    required_upsample,
    upsample_trilinear,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
INFER_BATCH = 2


class RunClock:
    """Start time and elapsed wall clock of one command."""

    def __init__(self) -> None:
        self.started_at = datetime.now(UTC)
        self._t0 = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self._t0


def write_manifest(
    out_dir: Path,
    command: str,
    clock: RunClock,
    config_path: Path | None = None,
    seed: int | None = None,
    inputs: dict[str, Any] | None = None,
    outputs: dict[str, Any] | None = None,
) -> Path:
    manifest = RunManifest(
        command=command,
        config_path=str(config_path) if config_path else None,
        seed=seed,
        inputs={k: str(v) for k, v in (inputs or {}).items()},
        outputs={k: str(v) for k, v in (outputs or {}).items()},
        version=__version__,
        started_at=clock.started_at,
        wall_clock_seconds=clock.elapsed,
    )
    path = Path(out_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def run_synth(config_path: Path | None, out_dir: Path, seed: int | None = None) -> DatasetIndex:
    """Generate a synthetic dataset of paired volumes and SWC files."""
    clock = RunClock()
    cfg = load_config(config_path, SynthConfig)
    if seed is not None:
        cfg = cfg.model_copy(update={"synth": cfg.synth.model_copy(update={"seed": seed})})
    index = generate_dataset(cfg, out_dir)
    write_manifest(
        out_dir,
        "synth",
        clock,
        config_path,
        cfg.synth.seed,
        outputs={"samples": len(index.samples), "split": Path(out_dir) / "split.json"},
    )
    return index


def run_train(
    config_path: Path | None,
    dataset_dir: Path,
    out_dir: Path,
    seed: int | None = None,
    resume: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> TrainResult:
    """Train a model on the train split of a synthetic dataset."""
    clock = RunClock()
    cfg = load_config(config_path, TrainConfig, {"seed": seed, **(overrides or {})})
    dataset = build_dataset(dataset_dir, cfg)
    model = load_checkpoint(resume, cfg.model) if resume else build_model(cfg.model, cfg.seed)
    result = train(model, dataset, cfg, out_dir, resume=resume)
    write_manifest(
        out_dir,
        "train",
        clock,
        config_path,
        cfg.seed,
        inputs={"dataset": dataset_dir, **({"resume": resume} if resume else {})},
        outputs={"checkpoint": result.checkpoint, "loss_log": result.log_path},
    )
    return result


@dataclass(frozen=True)
class InferenceResult:
    forest: SwcForest
    factor: int
    working_dims: Dims
    origins: list[tuple[int, int, int]]


def _predict_blocks(
    model: PointSetTransformer, blocks: Sequence[np.ndarray], workers: int
) -> list[PointSet]:
    chunks = [np.stack(blocks[i : i + INFER_BATCH]) for i in range(0, len(blocks), INFER_BATCH)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda chunk: predict_points(model, chunk), chunks))
    return [ps for chunk in results for ps in chunk]


def infer_volume(
    model: PointSetTransformer,
    volume: Volume,
    cfg: ConnectConfig,
    workers: int | None = None,
) -> InferenceResult:
    """Blockify, predict every block, and connect the points into a forest.

    The forest is returned in the coordinates of the input volume, whatever
    magnification was used for the working grid.
    """
    size = model.cfg.block_size
    if cfg.block_size != size:
        logger.warning("Using the model block size %d instead of %d", size, cfg.block_size)
    if cfg.upsample > 1:
        factor = cfg.upsample
    elif cfg.auto_upsample:
        factor = required_upsample(volume.dims, size)
    else:
        factor = 1
    working = upsample_trilinear(volume, factor)
    origins = blockify(working, size, cfg.overlap)
    logger.info("Working grid %s with %d blocks", working.dims, len(origins))
    blocks = [extract_block(working, origin, size).data for origin in origins]
    point_sets = _predict_blocks(model, blocks, workers or worker_count())
    forest = reconstruct(point_sets, origins, size, cfg)
    if factor > 1:
        forest = forest.transform_centers(lambda c: c / factor).scale_radii(1.0 / factor)
    return InferenceResult(forest, factor, working.dims, origins)


def run_infer(
    checkpoint: Path,
    volume_path: Path,
    out_swc: Path,
    config_path: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> InferenceResult:
    """Reconstruct a volume with a trained checkpoint and write the SWC."""
    clock = RunClock()
    cfg = load_config(config_path, ConnectConfig, overrides)
    model = load_checkpoint(checkpoint)
    result = infer_volume(model, load_volume(volume_path), cfg)
    out_swc = Path(out_swc)
    out_swc.parent.mkdir(parents=True, exist_ok=True)
    save_swc(result.forest, out_swc)
    write_manifest(
        out_swc.parent,
        "infer",
        clock,
        config_path,
        inputs={"checkpoint": checkpoint, "volume": volume_path},
        outputs={"swc": out_swc, "upsample": result.factor, "working_dims": result.working_dims},
    )
    return result


def run_eval(
    pred_swc: Path, gt_swc: Path, dims: Dims, out_json: Path | None = None
) -> ScoreReport:
    """Score a predicted SWC against ground truth by voxel overlap."""
    clock = RunClock()
    report = evaluate(read_swc(pred_swc), read_swc(gt_swc), dims)
    if out_json is not None:
        out_json = Path(out_json)
        out_json.parent.mkdir(parents=True, exist_ok=True)
        report.save(out_json)
        write_manifest(
            out_json.parent,
            "eval",
            clock,
            inputs={"pred": pred_swc, "gt": gt_swc, "dims": dims},
            outputs={"scores": out_json},
        )
    return report


def check_swc_files(paths: Sequence[Path]) -> dict[Path, list[str]]:
    """Validation report per file; an empty list means the file is valid."""
    reports: dict[Path, list[str]] = {}
    for path in paths:
        try:
            reports[path] = [str(v) for v in validate(read_swc(path))]
        except SwcStructureError as e:
            reports[path] = list(e.violations)
        except (SwcParseError, OSError) as e:
            reports[path] = [str(e)]
    return reports
