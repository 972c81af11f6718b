"""Rasterization, synthetic image formation and random forest generation."""

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import Dims, RenderSpec, SynthConfig, SynthSpec
from .errors import GenerationError
from .swc import TAG_DENDRITE, TAG_SOMA, SwcForest, SwcNode, save_swc
from .volume import U8_TO_U16, Volume, save_volume

logger = logging.getLogger(__name__)

PSF_TRUNCATE = 3.0
MAX_PLACEMENT_ATTEMPTS = 50
SPLIT_STREAM = 2**31 - 1

Seed = int | Sequence[int]


def _sorted_sum(values: np.ndarray) -> np.ndarray:
    """Sum over the last axis in ascending order, independent of axis order."""
    return np.sort(values, axis=-1).sum(axis=-1)


def _voxel_window(
    lo: np.ndarray, hi: np.ndarray, dims: Dims
) -> tuple[slice, slice, slice] | None:
    start = np.maximum(np.floor(lo - 0.5).astype(int), 0)
    stop = np.minimum(np.ceil(hi - 0.5).astype(int) + 1, dims)
    if np.any(stop <= start):
        return None
    return (slice(start[0], stop[0]), slice(start[1], stop[1]), slice(start[2], stop[2]))


def _offsets(window: tuple[slice, slice, slice], anchor: np.ndarray) -> np.ndarray:
    """Voxel-centre positions in ``window`` relative to ``anchor``, shape (..., 3)."""
    axes = [np.arange(s.start, s.stop) + 0.5 - a for s, a in zip(window, anchor, strict=True)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid, axis=-1)


def _paint_sphere(mask: np.ndarray, centre: np.ndarray, radius: float) -> None:
    window = _voxel_window(centre - radius, centre + radius, mask.shape)  # type: ignore[arg-type]
    if window is None:
        return
    d = _offsets(window, centre)
    mask[window] |= _sorted_sum(d * d) <= radius * radius


def _paint_frustum(
    mask: np.ndarray, a: np.ndarray, b: np.ndarray, ra: float, rb: float
) -> None:
    """Union of the spheres swept from (a, ra) to (b, rb) with linear radius."""
    e = b - a
    ee = float(_sorted_sum(e * e))
    if ee == 0:
        _paint_sphere(mask, a, max(ra, rb))
        return
    reach = max(ra, rb)
    window = _voxel_window(np.minimum(a, b) - reach, np.maximum(a, b) + reach, mask.shape)  # type: ignore[arg-type]
    if window is None:
        return
    d = _offsets(window, a)
    length = np.sqrt(ee)
    along = _sorted_sum(d * e) / length
    across2 = np.maximum(_sorted_sum(d * d) - along * along, 0.0)
    slope = (rb - ra) / length
    if abs(slope) < 1:
        u = along + slope * np.sqrt(across2) / np.sqrt(1 - slope * slope)
    else:
        u = np.full_like(along, length if slope > 0 else 0.0)
    u = np.clip(u, 0.0, length)
    radius = ra + slope * u
    mask[window] |= (radius >= 0) & ((u - along) ** 2 + across2 <= radius * radius)


def rasterize_mask(forest: SwcForest, dims: Dims) -> np.ndarray:
    """Boolean mask, indexed [x, y, z], of voxels whose centre lies inside the forest.

    Every parent-child edge sweeps a sphere whose radius varies linearly
    between the endpoint radii; roots without children render as spheres.
    Nodes outside ``dims`` contribute only their in-bounds voxels.
    """
    mask = np.zeros(tuple(dims), dtype=bool)
    for node in forest.nodes:
        centre = np.asarray(node.center, dtype=np.float64)
        if node.is_root:
            if not forest.children.get(node.id):
                _paint_sphere(mask, centre, node.radius)
            continue
        parent = forest.by_id[node.parent_id]
        _paint_frustum(
            mask, np.asarray(parent.center, dtype=np.float64), centre, parent.radius, node.radius
        )
    return mask


def render_image(forest: SwcForest, spec: RenderSpec, seed: Seed = 0) -> Volume:
    """Synthetic microscope image of ``forest``.

    The mask is scaled to the foreground intensity over a constant background,
    blurred with a Gaussian PSF truncated at 3 sigma, corrupted with i.i.d.
    Gaussian noise, then rounded and clamped to the dtype range.
    """
    image = rasterize_mask(forest, spec.dims) * spec.foreground_intensity + spec.background_level
    if spec.psf_sigma > 0:
        image = ndimage.gaussian_filter(
            image, spec.psf_sigma, truncate=PSF_TRUNCATE, mode="nearest"
        )
    if spec.noise_sd > 0:
        image = image + np.random.default_rng(seed).normal(0.0, spec.noise_sd, image.shape)
    limit = 255 if spec.dtype == "u8" else 65535
    image = np.clip(np.rint(image), 0, limit)
    if spec.dtype == "u8":
        image *= U8_TO_U16
    return Volume(image.astype(np.float32), dtype=spec.dtype)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.array([1.0, 0.0, 0.0])


def _vec3(point: np.ndarray) -> tuple[float, float, float]:
    return (float(point[0]), float(point[1]), float(point[2]))


def gen_random_forest(spec: SynthSpec, rng: np.random.Generator | None = None) -> SwcForest:
    """Random-walk trees with occasional branching, every node inside ``spec.dims``.

    Roots carry the soma tag, every other node the dendrite tag. Centres and
    radii are rounded to three decimals.

    Raises:
        GenerationError: The settings cannot be satisfied inside the volume
    """
    dims = np.asarray(spec.dims, dtype=np.float64)
    if spec.step_range[0] >= dims.min():
        raise GenerationError(
            f"minimum step {spec.step_range[0]} does not fit in dims {spec.dims}"
        )
    rng = rng or np.random.default_rng(spec.seed)
    nodes: list[SwcNode] = []
    next_id = 1
    for tree in range(spec.n_trees):
        count = int(rng.integers(spec.nodes_per_tree[0], spec.nodes_per_tree[1] + 1))
        root = np.round(rng.uniform(0.25 * dims, 0.75 * dims), 3)
        positions = {next_id: root}
        headings = {next_id: _random_direction(rng)}
        root_radius = round(float(rng.uniform(*spec.radius_range)), 3)
        nodes.append(SwcNode(next_id, TAG_SOMA, _vec3(root), root_radius))
        tip = next_id
        next_id += 1
        for _ in range(count - 1):
            placed = False
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                parent = tip
                if rng.random() < spec.branch_probability:
                    parent = int(rng.choice(list(positions)))
                heading = headings[parent] + 0.5 * _random_direction(rng)
                heading /= np.linalg.norm(heading) or 1.0
                step = rng.uniform(*spec.step_range)
                point = np.round(positions[parent] + step * heading, 3)
                if np.all(point >= 0) and np.all(point < dims):
                    placed = True
                    break
                headings[parent] = _random_direction(rng)
            if not placed:
                raise GenerationError(
                    f"tree {tree}: no room to grow node {next_id} inside {spec.dims}"
                )
            radius = round(float(rng.uniform(*spec.radius_range)), 3)
            nodes.append(SwcNode(next_id, TAG_DENDRITE, _vec3(point), radius, parent))
            positions[next_id] = point
            headings[next_id] = heading
            tip = next_id
            next_id += 1
    logger.debug("Generated %d trees with %d nodes", spec.n_trees, len(nodes))
    return SwcForest(tuple(nodes))


@dataclass(frozen=True)
class DatasetIndex:
    """Sample names of a synthetic dataset and its train/test partition."""

    samples: tuple[str, ...]
    train: tuple[str, ...]
    test: tuple[str, ...]


def sample_name(index: int) -> str:
    return f"sample_{index:04d}"


def generate_dataset(cfg: SynthConfig, out_dir: Path) -> DatasetIndex:
    """Write ``n_samples`` paired volumes and SWC files plus ``split.json``.

    Every sample draws from its own seed stream so the dataset is identical
    for a given config regardless of how many samples precede it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.synth.seed
    names = []
    for i in range(cfg.n_samples):
        name = sample_name(i)
        forest = gen_random_forest(cfg.synth, np.random.default_rng([seed, i, 0]))
        volume = render_image(forest, cfg.render, seed=[seed, i, 1])
        save_swc(forest, out_dir / f"{name}.swc")
        save_volume(volume, out_dir / name)
        names.append(name)
        logger.info("Wrote %s with %d nodes", name, len(forest))

    order = np.random.default_rng([seed, SPLIT_STREAM]).permutation(len(names))
    n_test = round(cfg.test_fraction * len(names))
    test = tuple(sorted(names[k] for k in order[:n_test]))
    train = tuple(sorted(names[k] for k in order[n_test:]))
    (out_dir / "split.json").write_text(
        json.dumps({"train": list(train), "test": list(test)}, indent=2) + "\n",
        encoding="utf-8",
    )
    return DatasetIndex(tuple(names), train, test)


def read_split(dataset_dir: Path) -> DatasetIndex:
    """Read ``split.json``; datasets without one use every sample for training."""
    dataset_dir = Path(dataset_dir)
    names = tuple(sorted(p.stem for p in dataset_dir.glob("*.swc")))
    split_path = dataset_dir / "split.json"
    if not split_path.exists():
        return DatasetIndex(names, names, ())
    split = json.loads(split_path.read_text(encoding="utf-8"))
    return DatasetIndex(names, tuple(split.get("train", ())), tuple(split.get("test", ())))
