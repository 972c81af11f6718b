"""Voxel-overlap scores between predicted and ground-truth reconstructions."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .config import Dims
from .errors import DimensionError
from .swc import SwcForest
from .synth import rasterize_mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    fscore: float
    jaccard: float


class ScoreReport(BaseModel):
    """JSON score report: the four scores plus the voxel counts behind them."""

    precision: float
    recall: float
    fscore: float
    jaccard: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_confusion(cls, c: Confusion) -> "ScoreReport":
        s = scores(c)
        return cls(
            precision=s.precision,
            recall=s.recall,
            fscore=s.fscore,
            jaccard=s.jaccard,
            tp=c.tp,
            fp=c.fp,
            fn=c.fn,
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> Confusion:
    """Voxelwise true positive, false positive and false negative counts."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return Confusion(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def _ratio(num: float, den: float) -> float:
    # 0/0 scores as 0
    return num / den if den else 0.0


def scores(c: Confusion) -> Scores:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return Scores(
        precision=precision,
        recall=recall,
        fscore=_ratio(2 * precision * recall, precision + recall),
        jaccard=_ratio(c.tp, c.tp + c.fp + c.fn),
    )


def evaluate(pred_forest: SwcForest, gt_forest: SwcForest, dims: Dims) -> ScoreReport:
    """Rasterize both forests into ``dims`` and score their overlap."""
    c = confusion(rasterize_mask(pred_forest, dims), rasterize_mask(gt_forest, dims))
    report = ScoreReport.from_confusion(c)
    logger.info(
        "precision %.4f recall %.4f fscore %.4f jaccard %.4f",
        report.precision,
        report.recall,
        report.fscore,
        report.jaccard,
    )
    return report
