"""SWC neuron morphology: parsing, validation, writing and per-block ground truth.

An SWC file holds one node per line with seven whitespace-separated fields::

    id  tag  x  y  z  radius  parent

Lines starting with ``#`` are comments and a parent of ``-1`` marks a root.
Coordinates and radii are in voxels of the image the forest annotates.
"""

import heapq
import logging
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field, replace
from functools import cached_property
from io import StringIO
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import SwcParseError, SwcStructureError
from .matching import PointSet

logger = logging.getLogger(__name__)

ROOT_PARENT = -1
SWC_FIELD_COUNT = 7

TAG_UNDEFINED = 0
TAG_SOMA = 1
TAG_DENDRITE = 3

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class SwcNode:
    """One SWC sample: a sphere on the neuron centreline."""

    id: int
    tag: int
    center: Vec3
    radius: float
    parent_id: int = ROOT_PARENT

    @property
    def is_root(self) -> bool:
        return self.parent_id == ROOT_PARENT


@dataclass(frozen=True)
class Violation:
    """A single broken forest invariant."""

    kind: str
    node_id: int
    message: str

    def __str__(self) -> str:
        return f"{self.kind} at node {self.node_id}: {self.message}"


@dataclass(frozen=True, eq=False)
class SwcForest:
    """One or more rooted trees of SWC nodes.

    Construction does not validate; use :func:`validate` or build through
    :func:`parse_swc`, which rejects invalid input.
    """

    nodes: tuple[SwcNode, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[SwcNode]:
        return iter(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SwcForest):
            return NotImplemented
        return sorted(self.nodes, key=_node_key) == sorted(other.nodes, key=_node_key)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.nodes, key=_node_key)))

    @cached_property
    def by_id(self) -> dict[int, SwcNode]:
        return {node.id: node for node in self.nodes}

    @cached_property
    def children(self) -> dict[int, list[int]]:
        """Mapping from node id to the ids of its children, ascending."""
        index: dict[int, list[int]] = defaultdict(list)
        for node in self.nodes:
            if not node.is_root:
                index[node.parent_id].append(node.id)
        return {k: sorted(v) for k, v in index.items()}

    @property
    def roots(self) -> list[SwcNode]:
        return sorted((n for n in self.nodes if n.is_root), key=lambda n: n.id)

    def edges(self) -> list[tuple[int, int]]:
        """(parent_id, child_id) pairs."""
        return [(n.parent_id, n.id) for n in self.nodes if not n.is_root]

    def centers(self) -> np.ndarray:
        return np.array([n.center for n in self.nodes], dtype=np.float64).reshape(
            -1, 3
        )

    def radii(self) -> np.ndarray:
        return np.array([n.radius for n in self.nodes], dtype=np.float64)

    def depths(self) -> dict[int, int]:
        """Number of edges from each node to its root (valid forests only)."""
        depth: dict[int, int] = {}
        queue = [root.id for root in self.roots]
        for root_id in queue:
            depth[root_id] = 0
        while queue:
            current = queue.pop()
            for child in self.children.get(current, []):
                depth[child] = depth[current] + 1
                queue.append(child)
        return depth

    def subtree(self, node_id: int) -> "SwcForest":
        """The tree hanging from ``node_id``, re-rooted at that node."""
        keep: list[SwcNode] = []
        stack = [node_id]
        while stack:
            current = stack.pop()
            node = self.by_id[current]
            if current == node_id:
                node = replace(node, parent_id=ROOT_PARENT)
            keep.append(node)
            stack.extend(self.children.get(current, []))
        return SwcForest(tuple(sorted(keep, key=lambda n: n.id)))

    def map_nodes(self, fn: Callable[[SwcNode], SwcNode]) -> "SwcForest":
        return SwcForest(tuple(fn(node) for node in self.nodes))

    def transform_centers(self, fn: Callable[[np.ndarray], np.ndarray]) -> "SwcForest":
        """Apply ``fn`` to every centre (as a 3-vector)."""
        return self.map_nodes(
            lambda n: replace(
                n, center=tuple(float(v) for v in fn(np.asarray(n.center)))
            )
        )

    def scale_radii(self, factor: float) -> "SwcForest":
        return self.map_nodes(lambda n: replace(n, radius=n.radius * factor))

    def median_radius(self) -> float:
        return float(np.median(self.radii())) if self.nodes else 0.0


def _node_key(node: SwcNode) -> int:
    return node.id


def _parse_int(token: str) -> int:
    try:
        return int(token)
    except ValueError:
        value = float(token)
        if not value.is_integer():
            raise
        return int(value)


def _parse_line(line: str, line_number: int) -> SwcNode:
    fields = line.split()
    if len(fields) != SWC_FIELD_COUNT:
        raise SwcParseError(
            line_number, f"expected {SWC_FIELD_COUNT} fields, got {len(fields)}"
        )
    try:
        node_id = _parse_int(fields[0])
        tag = _parse_int(fields[1])
        x, y, z, radius = (float(v) for v in fields[2:6])
        parent_id = _parse_int(fields[6])
    except ValueError as e:
        raise SwcParseError(line_number, f"non-numeric field in {line!r}") from e
    if not all(np.isfinite([x, y, z, radius])):
        raise SwcParseError(line_number, f"non-finite value in {line!r}")
    return SwcNode(node_id, tag, (x, y, z), radius, parent_id)


def parse_swc(text: str | TextIO) -> SwcForest:
    """Parse SWC text into a validated forest.

    Raises:
        SwcParseError: A data line is malformed (carries the line number)
        SwcStructureError: Duplicate ids, dangling or cyclic parents
    """
    stream = StringIO(text) if isinstance(text, str) else text
    nodes = []
    for line_number, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        nodes.append(_parse_line(line, line_number))
    forest = SwcForest(tuple(nodes))
    violations = validate(forest)
    if violations:
        raise SwcStructureError([str(v) for v in violations])
    return forest


def read_swc(path: Path) -> SwcForest:
    with Path(path).open(encoding="utf-8") as f:
        return parse_swc(f)


def validate(forest: SwcForest) -> list[Violation]:
    """List every violated forest invariant; empty iff the forest is valid."""
    violations: list[Violation] = []
    counts = Counter(node.id for node in forest.nodes)
    for node_id, count in sorted(counts.items()):
        if count > 1:
            violations.append(
                Violation("duplicate-id", node_id, f"id appears {count} times")
            )

    parents: dict[int, int] = {}
    for node in forest.nodes:
        if node.id < 1:
            violations.append(Violation("invalid-id", node.id, "ids must be >= 1"))
        if node.radius < 0:
            violations.append(
                Violation("negative-radius", node.id, f"radius {node.radius} < 0")
            )
        parents.setdefault(node.id, node.parent_id)

    for node in forest.nodes:
        if node.is_root:
            continue
        if node.parent_id == node.id:
            violations.append(Violation("cycle", node.id, "node is its own parent"))
        elif node.parent_id not in parents:
            violations.append(
                Violation(
                    "dangling-parent", node.id, f"parent {node.parent_id} is absent"
                )
            )

    violations.extend(_find_cycles(parents))
    return violations


def _find_cycles(parents: dict[int, int]) -> list[Violation]:
    resolved: set[int] = set()
    found: list[Violation] = []
    for start in sorted(parents):
        path: list[int] = []
        on_path: set[int] = set()
        current = start
        while (
            current in parents
            and current not in resolved
            and current not in on_path
            and parents[current] != current
        ):
            path.append(current)
            on_path.add(current)
            current = parents[current]
        if current in on_path:
            cycle = path[path.index(current) :]
            found.append(
                Violation(
                    "cycle",
                    min(cycle),
                    "parent chain loops through " + " -> ".join(map(str, cycle)),
                )
            )
        resolved.update(path)
    return found


def topological_order(forest: SwcForest) -> list[SwcNode]:
    """Parents before children; ties broken by ascending id."""
    heap = [node.id for node in forest.nodes if node.is_root]
    heapq.heapify(heap)
    ordered = []
    while heap:
        node_id = heapq.heappop(heap)
        ordered.append(forest.by_id[node_id])
        for child in forest.children.get(node_id, []):
            heapq.heappush(heap, child)
    return ordered


def write_swc(forest: SwcForest) -> str:
    """Serialize a valid forest, parents first, six decimals per float.

    Raises:
        SwcStructureError: The forest is invalid
    """
    violations = validate(forest)
    if violations:
        raise SwcStructureError([str(v) for v in violations])
    lines = ["# id type x y z radius parent"]
    for node in topological_order(forest):
        x, y, z = node.center
        lines.append(
            f"{node.id} {node.tag} {x:.6f} {y:.6f} {z:.6f} {node.radius:.6f} "
            f"{node.parent_id}"
        )
    return "\n".join(lines) + "\n"


def save_swc(forest: SwcForest, path: Path) -> None:
    Path(path).write_text(write_swc(forest), encoding="utf-8")


def block_ground_truth(
    forest: SwcForest, block_origin: Iterable[float], block_size: int
) -> PointSet:
    """Normalized target points for the nodes inside one block.

    Membership is half-open, ``origin <= center < origin + size`` on every
    axis, so a disjoint tiling assigns each node to exactly one block.
    """
    if block_size <= 0:
        raise ValueError(f"block_size must be positive, got {block_size}")
    origin = np.asarray(tuple(block_origin), dtype=np.float64)
    if not forest.nodes:
        return PointSet.ground_truth(np.zeros((0, 5)))
    centers = forest.centers()
    inside = np.all((centers >= origin) & (centers < origin + block_size), axis=1)
    local = (centers[inside] - origin) / block_size
    radii = np.minimum(forest.radii()[inside] / block_size, 1.0)
    points = np.column_stack([local, radii, np.ones(len(radii))])
    return PointSet.ground_truth(points)


def resample_forest(forest: SwcForest, spacing: float) -> SwcForest:
    """Insert interpolated nodes so no edge is longer than ``spacing``.

    New nodes take linearly interpolated centres and radii and the child's tag;
    ids continue after the current maximum.
    """
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    next_id = max((n.id for n in forest.nodes), default=0) + 1
    result: list[SwcNode] = []
    for node in topological_order(forest):
        if node.is_root:
            result.append(node)
            continue
        parent = forest.by_id[node.parent_id]
        start = np.asarray(parent.center)
        end = np.asarray(node.center)
        pieces = int(np.ceil(np.linalg.norm(end - start) / spacing))
        previous = parent.id
        for k in range(1, pieces):
            t = k / pieces
            point = start + t * (end - start)
            result.append(
                SwcNode(
                    next_id,
                    node.tag,
                    (float(point[0]), float(point[1]), float(point[2])),
                    parent.radius + t * (node.radius - parent.radius),
                    previous,
                )
            )
            previous = next_id
            next_id += 1
        result.append(replace(node, parent_id=previous))
    logger.debug("Resampled %d nodes into %d", len(forest), len(result))
    return SwcForest(tuple(result))
