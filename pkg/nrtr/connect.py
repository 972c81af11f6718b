"""Turn predicted point sets into SWC forests.

Per-block predictions are thresholded, moved to volume coordinates, merged
where blocks overlap, linked by a Euclidean minimum spanning tree and split at
edges that are long compared with the radii they join.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.spatial.distance import cdist

from .config import ConnectConfig
from .matching import PointSet
from .swc import ROOT_PARENT, TAG_UNDEFINED, SwcForest, SwcNode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalPoint:
    """A predicted point in absolute voxel coordinates."""

    center: tuple[float, float, float]
    radius: float
    cls: float
    block: int


def filter_points(points: PointSet, threshold: float = 0.5) -> PointSet:
    """Drop no-object predictions: keep points with ``cls >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return PointSet(points.points[points.cls >= threshold], points.is_prediction)


def denormalize(
    points: PointSet, origin: Sequence[float], block_size: int, block: int = 0
) -> list[GlobalPoint]:
    centres = np.asarray(origin, dtype=np.float64) + points.centers * block_size
    return [
        GlobalPoint((float(c[0]), float(c[1]), float(c[2])), float(r * block_size), float(p), block)
        for c, r, p in zip(centres, points.radii, points.cls, strict=True)
    ]


def _merge_pair(a: GlobalPoint, b: GlobalPoint) -> GlobalPoint:
    wa, wb = (a.cls, b.cls) if a.cls + b.cls > 0 else (1.0, 1.0)
    total = wa + wb
    centre = (np.asarray(a.center) * wa + np.asarray(b.center) * wb) / total
    return GlobalPoint(
        (float(centre[0]), float(centre[1]), float(centre[2])),
        (a.radius * wa + b.radius * wb) / total,
        max(a.cls, b.cls),
        min(a.block, b.block),
    )


def merge_points(points: Sequence[GlobalPoint], merge_radius: float) -> list[GlobalPoint]:
    """Greedily fuse pairs closer than ``merge_radius``, nearest pairs first.

    Each pass takes disjoint pairs in ascending (distance, i, j) order; passes
    repeat until no pair is within range.
    """
    if merge_radius < 0:
        raise ValueError(f"merge_radius must be >= 0, got {merge_radius}")
    current = list(points)
    while len(current) > 1:
        centres = np.array([p.center for p in current])
        dist = cdist(centres, centres)
        i_idx, j_idx = np.nonzero(np.triu(dist <= merge_radius, k=1))
        if not len(i_idx):
            break
        order = np.lexsort((j_idx, i_idx, dist[i_idx, j_idx]))
        used: set[int] = set()
        merged: dict[int, GlobalPoint] = {}
        for k in order:
            i, j = int(i_idx[k]), int(j_idx[k])
            if i in used or j in used:
                continue
            used.update((i, j))
            merged[i] = _merge_pair(current[i], current[j])
        current = [
            merged.get(k, p) for k, p in enumerate(current) if k in merged or k not in used
        ]
    return current


def merge_blocks(
    per_block: Sequence[PointSet],
    origins: Sequence[Sequence[float]],
    block_size: int,
    merge_radius: float,
) -> list[GlobalPoint]:
    """Denormalize every block's kept points and merge duplicates across blocks."""
    points: list[GlobalPoint] = []
    for block, (ps, origin) in enumerate(zip(per_block, origins, strict=True)):
        points.extend(denormalize(ps, origin, block_size, block))
    merged = merge_points(points, merge_radius)
    logger.debug("Merged %d block points into %d", len(points), len(merged))
    return merged


def minimum_spanning_edges(centres: np.ndarray) -> list[tuple[int, int, float]]:
    """Dense Prim's algorithm from point 0; returns (parent, child, length) edges."""
    n = len(centres)
    if n < 2:
        return []
    dist = cdist(centres, centres)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    via = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        candidates = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidates))
        edges.append((int(via[nxt]), nxt, float(best[nxt])))
        in_tree[nxt] = True
        closer = ~in_tree & (dist[nxt] < best)
        best[closer] = dist[nxt][closer]
        via[closer] = nxt
    return edges


def build_forest(
    points: Sequence[GlobalPoint], tau: float = 3.0, absolute_cap: float = 30.0
) -> SwcForest:
    """Link points into SWC trees along a pruned Euclidean minimum spanning tree.

    An MST edge survives when its length is at most
    ``min(absolute_cap, tau * (r_i + r_j))``. Each component is rooted at its
    largest-radius point (lowest index on ties). Ids follow (tree, depth, index).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not points:
        return SwcForest(())
    centres = np.array([p.center for p in points], dtype=np.float64)
    radii = np.array([p.radius for p in points], dtype=np.float64)

    graph = nx.Graph()
    graph.add_nodes_from(range(len(points)))
    for i, j, length in minimum_spanning_edges(centres):
        if length <= min(absolute_cap, tau * (radii[i] + radii[j])):
            graph.add_edge(i, j)

    roots = sorted(
        min(component, key=lambda k: (-radii[k], k))
        for component in nx.connected_components(graph)
    )
    parent: dict[int, int] = {}
    rank: dict[int, tuple[int, int, int]] = {}
    for tree, root in enumerate(roots):
        parent[root] = -1
        for node, depth in nx.single_source_shortest_path_length(graph, root).items():
            rank[node] = (tree, depth, node)
        parent.update(dict(nx.bfs_predecessors(graph, root)))

    ordered = sorted(rank, key=rank.__getitem__)
    new_id = {node: k + 1 for k, node in enumerate(ordered)}
    nodes = tuple(
        SwcNode(
            new_id[k],
            TAG_UNDEFINED,
            points[k].center,
            float(radii[k]),
            new_id[parent[k]] if parent[k] >= 0 else ROOT_PARENT,
        )
        for k in ordered
    )
    logger.info("Built %d trees from %d points", len(roots), len(points))
    return SwcForest(nodes)


def reconstruct(
    point_sets: Sequence[PointSet],
    origins: Sequence[Sequence[float]],
    block_size: int,
    cfg: ConnectConfig,
) -> SwcForest:
    """Filter, merge and link per-block predictions into one forest."""
    kept = [filter_points(ps, cfg.threshold) for ps in point_sets]
    merged = merge_blocks(kept, origins, block_size, cfg.merge_radius)
    return build_forest(merged, cfg.tau, cfg.absolute_cap)
