"""Point sets, 3D generalized IoU, Hungarian assignment and the set loss.

A point is the 5-tuple ``(a, b, c, r, cls)`` normalized to its block: the
centre, the radius and the probability of the "neuron" category. Matching
pairs every ground-truth point with a distinct prediction; unmatched
predictions are supervised toward the no-object category.
"""

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossWeights
from .errors import DimensionError, InvalidCostError

logger = logging.getLogger(__name__)

POINT_FIELDS = 5
GEOMETRY = slice(0, 4)


class PredPoint(NamedTuple):
    """One normalized point: centre (a, b, c), radius r, neuron probability."""

    a: float
    b: float
    c: float
    r: float
    cls: float


@dataclass(frozen=True, eq=False)
class PointSet:
    """An ordered (K, 5) array of points tagged as prediction or ground truth."""

    points: np.ndarray
    is_prediction: bool = False

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, POINT_FIELDS)
        if not np.all(np.isfinite(points)):
            raise ValueError("point fields must be finite")
        if points.size and (points.min() < 0 or points.max() > 1):
            raise ValueError("point fields must lie in [0, 1]")
        if not self.is_prediction and np.any(points[:, 4] != 1):
            raise ValueError("ground-truth points must carry cls = 1")
        object.__setattr__(self, "points", points)

    @classmethod
    def ground_truth(cls, points: np.ndarray) -> "PointSet":
        return cls(np.asarray(points, dtype=np.float64), is_prediction=False)

    @classmethod
    def prediction(cls, points: np.ndarray) -> "PointSet":
        return cls(np.asarray(points, dtype=np.float64), is_prediction=True)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[PredPoint]:
        for row in self.points:
            yield PredPoint(*(float(v) for v in row))

    def __getitem__(self, index: int) -> PredPoint:
        return PredPoint(*(float(v) for v in self.points[index]))

    @property
    def centers(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def radii(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def cls(self) -> np.ndarray:
        return self.points[:, 4]

    def permuted(self, order: Sequence[int]) -> "PointSet":
        return PointSet(self.points[np.asarray(order, dtype=np.int64)], self.is_prediction)


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by its min and max corners."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(l > h for l, h in zip(self.lo, self.hi, strict=True)):  # noqa: E741
            raise ValueError(f"box corners out of order: {self.lo} > {self.hi}")

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


def point_to_box(p: PredPoint | Sequence[float]) -> Box3:
    """Cube centred on the point with half-extent r, not clamped to [0, 1]."""
    a, b, c, r = (float(v) for v in tuple(p)[:4])
    return Box3((a - r, b - r, c - r), (a + r, b + r, c + r))


def _corners(geometry: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centres = geometry[..., :3]
    radii = geometry[..., 3:4]
    return centres - radii, centres + radii


def pairwise_giou(
    lo_a: np.ndarray, hi_a: np.ndarray, lo_b: np.ndarray, hi_b: np.ndarray
) -> np.ndarray:
    """Generalized IoU between every box of A (M, 3) and every box of B (N, 3)."""
    lo_a, hi_a = lo_a[:, None, :], hi_a[:, None, :]
    lo_b, hi_b = lo_b[None, :, :], hi_b[None, :, :]
    inter = np.prod(np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0, None), axis=-1)
    union = np.prod(hi_a - lo_a, axis=-1) + np.prod(hi_b - lo_b, axis=-1) - inter
    hull = np.prod(np.maximum(hi_a, hi_b) - np.minimum(lo_a, lo_b), axis=-1)
    degenerate = union <= 0
    union = np.where(degenerate, 1.0, union)
    hull = np.where(degenerate, 1.0, hull)
    return np.where(degenerate, 0.0, inter / union - (hull - union) / hull)


def giou3(a: Box3, b: Box3) -> float:
    """Generalized IoU of two boxes; 0 when both have zero volume."""
    value = pairwise_giou(
        np.array([a.lo]), np.array([a.hi]), np.array([b.lo]), np.array([b.hi])
    )
    return float(value[0, 0])


def point_cost(
    gt: PredPoint | Sequence[float], pred: PredPoint | Sequence[float], w: LossWeights
) -> float:
    """Matching cost of pairing one ground-truth point with one prediction."""
    return float(cost_matrix(np.array([tuple(gt)]), np.array([tuple(pred)]), w)[0, 0])


def cost_matrix(gt: np.ndarray, pred: np.ndarray, w: LossWeights) -> np.ndarray:
    """(M, N) matrix of point costs between ground-truth and predicted rows."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, POINT_FIELDS)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, POINT_FIELDS)
    l1 = np.abs(gt[:, None, GEOMETRY] - pred[None, :, GEOMETRY]).sum(axis=-1)
    giou = pairwise_giou(*_corners(gt[:, GEOMETRY]), *_corners(pred[:, GEOMETRY]))
    return -w.w_cls * pred[None, :, 4] + w.w_box * l1 + w.w_iou * (1.0 - giou)


@dataclass(frozen=True)
class Assignment:
    """Ground-truth index i is matched to prediction ``pred_index[i]``."""

    pred_index: tuple[int, ...]
    total_cost: float

    def __len__(self) -> int:
        return len(self.pred_index)

    def pairs(self) -> list[tuple[int, int]]:
        return list(enumerate(self.pred_index))

    def matched_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        mask[list(self.pred_index)] = True
        return mask


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian for an M x N matrix with M <= N.

    Returns the column of each row and the dual potentials (u, v).
    """
    m, n = cost.shape
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, m + 1):
        owner[0] = row
        col = 0
        slack = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while owner[col] != 0:
            used[col] = True
            i0 = owner[col]
            free = ~used
            free[0] = False
            reduced = np.full(n + 1, np.inf)
            reduced[1:] = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < slack)
            slack[better] = reduced[better]
            way[better] = col
            candidates = np.where(free, slack, np.inf)
            nxt = int(np.argmin(candidates))
            delta = candidates[nxt]
            visited = np.flatnonzero(used)
            u[owner[visited]] += delta
            v[visited] -= delta
            slack[free] -= delta
            col = nxt
        while col:
            prev = way[col]
            owner[col] = owner[prev]
            col = prev
    cols = np.empty(m, dtype=np.int64)
    for j in range(1, n + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of rows to columns.

    Among cost-equal optima the lexicographically smallest column sequence
    (row 0 first) is returned.

    Raises:
        DimensionError: More rows than columns
        InvalidCostError: NaN or infinite entries
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise DimensionError(f"cannot assign {m} rows to {n} columns")
    if not np.all(np.isfinite(cost)):
        raise InvalidCostError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment((), 0.0)

    current, u, v = _solve(cost)
    rows = np.arange(m)
    best = float(cost[rows, current].sum())
    tol = 1e-9 * max(1.0, abs(best), float(np.abs(cost).max()))
    taken: set[int] = set()
    fixed = 0.0
    for i in range(m):
        tight = np.flatnonzero(cost[i] - u[i] - v <= tol)
        for j in (int(c) for c in tight):
            if j >= current[i]:
                break
            if j in taken:
                continue
            free = np.array([c for c in range(n) if c not in taken and c != j], dtype=np.int64)
            rest = cost[i + 1 :][:, free]
            sub = _solve(rest)[0] if len(rest) else np.empty(0, dtype=np.int64)
            total = fixed + cost[i, j] + float(rest[np.arange(len(rest)), sub].sum())
            if total <= best + tol:
                current[i] = j
                current[i + 1 :] = free[sub]
                break
        taken.add(int(current[i]))
        fixed += cost[i, current[i]]
    assignment = Assignment(tuple(int(c) for c in current), float(cost[rows, current].sum()))
    logger.debug("Matched %d of %d predictions, cost %.6f", m, n, assignment.total_cost)
    return assignment


@dataclass
class SetLoss:
    """Differentiable total with a float breakdown and the matching used."""

    total: Tensor
    assignment: Assignment
    terms: dict[str, float] = field(default_factory=dict)


def _giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise generalized IoU between predicted (M, 4) and target (M, 4) cubes."""
    centre = pred[:, 0:3]
    radius = pred[:, 3:4]
    half = ad.concat([radius, radius, radius], axis=1)
    lo, hi = centre - half, centre + half
    glo, ghi = _corners(gt)

    def volume(sides: Tensor) -> Tensor:
        return sides[:, 0] * sides[:, 1] * sides[:, 2]

    inter = volume(ad.relu(ad.minimum(hi, ghi) - ad.maximum(lo, glo)))
    union = volume(hi - lo) + np.prod(ghi - glo, axis=1) - inter
    hull = volume(ad.maximum(hi, ghi) - ad.minimum(lo, glo))
    degenerate = (union.data <= 0).astype(pred.dtype)
    safe_union = union + degenerate
    safe_hull = hull + degenerate
    return (inter / safe_union - (hull - union) / safe_hull) * (1 - degenerate)


def set_loss(
    gt: PointSet, pred: Tensor | PointSet | np.ndarray, w: LossWeights
) -> SetLoss:
    """Match ``gt`` to ``pred`` and build the differentiable set loss.

    The loss sums, over matched pairs, ``w_box * L1 + w_iou * (1 - giou)``
    and, over every prediction, ``-log p`` when matched or
    ``-no_object_weight * log(1 - p)`` when unmatched.

    Raises:
        DimensionError: More ground-truth points than predictions
    """
    if isinstance(pred, PointSet):
        pred = pred.points
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred, dtype=np.float64)
    if pred_t.ndim != 2 or pred_t.shape[1] != POINT_FIELDS:
        raise DimensionError(f"predictions must have shape (N, 5), got {pred_t.shape}")
    m, n = len(gt), pred_t.shape[0]
    if m > n:
        raise DimensionError(f"{m} ground-truth points exceed {n} predictions")

    assignment = hungarian(cost_matrix(gt.points, pred_t.data, w))
    matched = assignment.matched_mask(n).astype(pred_t.dtype)
    eps = float(np.finfo(pred_t.dtype).eps)
    p = ad.clip(pred_t[:, 4], eps, 1 - eps)
    loss_cls = -(
        ad.tensor_sum(ad.log(p) * matched)
        + w.no_object_weight * ad.tensor_sum(ad.log(1 - p) * (1 - matched))
    )
    total = loss_cls
    terms = {"cls": loss_cls.item(), "box": 0.0, "giou": 0.0}
    if m:
        chosen = ad.embedding_lookup(pred_t, np.asarray(assignment.pred_index))
        geometry = chosen[:, 0:4]
        target = gt.points[:, GEOMETRY].astype(pred_t.dtype)
        loss_box = w.w_box * ad.tensor_sum(ad.tensor_abs(geometry - target))
        loss_giou = w.w_iou * ad.tensor_sum(1 - _giou_tensor(geometry, target))
        total = total + loss_box + loss_giou
        terms["box"] = loss_box.item()
        terms["giou"] = loss_giou.item()
    return SetLoss(total, assignment, terms)
