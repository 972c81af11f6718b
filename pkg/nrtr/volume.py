"""Volume container I/O, resampling and block cropping.

A volume on disk is a pair of files: ``{name}.json`` with the header fields of
:class:`~nrtr.config.VolumeHeader` and ``{name}.raw`` with exactly W*H*D
little-endian samples, x fastest. In memory the samples are float32 indexed
``data[x, y, z]`` on the 16-bit intensity scale.
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import Dims, VolumeHeader, validate_config
from .errors import ConfigError, DimensionError, VolumeFormatError
from .swc import SwcForest

logger = logging.getLogger(__name__)

U8_TO_U16 = 257
U16_MAX = 65535
NORMALIZE_PERCENTILES = (1.0, 99.5)

_RAW_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D intensity grid with voxel spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: str = "u16"

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise VolumeFormatError(f"volume data must be a non-empty 3-D grid, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Dims:
        x, y, z = self.data.shape
        return (x, y, z)


@dataclass(frozen=True, eq=False)
class Block:
    """A cubic crop with normalized intensities in [0, 1]."""

    origin: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.data.shape[0])


def _container_paths(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def load_volume(path: Path) -> Volume:
    """Read a volume container; ``path`` may name the stem, header or payload.

    Raises:
        VolumeFormatError: Missing or corrupt header, or a payload of the wrong length
    """
    header_path, raw_path = _container_paths(path)
    try:
        header = validate_config(
            VolumeHeader, json.loads(header_path.read_text(encoding="utf-8"))
        )
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        raise VolumeFormatError(f"bad volume header {header_path}: {e}") from e
    try:
        raw = np.fromfile(raw_path, dtype=_RAW_DTYPES[header.dtype])
    except OSError as e:
        raise VolumeFormatError(f"cannot read volume payload {raw_path}: {e}") from e
    w, h, d = header.dims
    if raw.size != w * h * d:
        raise VolumeFormatError(
            f"{raw_path} holds {raw.size} samples, header dims {header.dims} need {w * h * d}"
        )
    data = raw.reshape(d, h, w).transpose(2, 1, 0).astype(np.float32)
    if header.dtype == "u8":
        data *= U8_TO_U16
    logger.debug("Loaded %s volume %s from %s", header.dtype, header.dims, raw_path)
    return Volume(data, header.spacing, header.dtype)


def save_volume(volume: Volume, path: Path, dtype: str | None = None) -> tuple[Path, Path]:
    """Write a volume container, rounding and clamping to the on-disk dtype."""
    dtype = dtype or volume.dtype
    if dtype not in _RAW_DTYPES:
        raise VolumeFormatError(f"unsupported volume dtype {dtype!r}")
    header_path, raw_path = _container_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    values = volume.data / U8_TO_U16 if dtype == "u8" else volume.data
    limit = np.iinfo(_RAW_DTYPES[dtype]).max
    payload = np.clip(np.rint(values), 0, limit).astype(_RAW_DTYPES[dtype])
    header = VolumeHeader(dims=volume.dims, dtype=dtype, spacing=volume.spacing)  # type: ignore[arg-type]
    header_path.write_text(header.model_dump_json(indent=2) + "\n", encoding="utf-8")
    payload.transpose(2, 1, 0).tofile(raw_path)
    return header_path, raw_path


def upsample_trilinear(volume: Volume, factor: int) -> Volume:
    """Magnify by an integer factor with sample-centre aligned trilinear interpolation.

    Output sample i reads the input at ``(i + 0.5) / factor - 0.5``, clamped
    to the border.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return volume
    data = ndimage.zoom(
        volume.data, factor, order=1, mode="nearest", grid_mode=True, output=np.float32
    )
    spacing = tuple(s / factor for s in volume.spacing)
    logger.info("Upsampled volume %s by %d to %s", volume.dims, factor, data.shape)
    return Volume(data, spacing, volume.dtype)  # type: ignore[arg-type]


def _axis_origins(n: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] != n - size:
        origins.append(n - size)
    return origins


def blockify(
    volume: Volume | Dims, block_size: int = 64, overlap: int = 0
) -> list[tuple[int, int, int]]:
    """Block origins on a stride ``block_size - overlap`` grid, x outermost.

    The last block on each axis is shifted inward to end at the border.

    Raises:
        DimensionError: The volume is smaller than one block on some axis
    """
    if not 0 <= overlap < block_size:
        raise ValueError(f"overlap must be in [0, {block_size}), got {overlap}")
    dims = volume.dims if isinstance(volume, Volume) else tuple(volume)
    if min(dims) < block_size:
        raise DimensionError(f"volume {dims} is smaller than block size {block_size}; upsample first")
    per_axis = [_axis_origins(n, block_size, block_size - overlap) for n in dims]
    return [(x, y, z) for x, y, z in itertools.product(*per_axis)]


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map to [0, 1] between the 1st and 99.5th percentiles; constant input gives zeros."""
    raw = np.asarray(raw, dtype=np.float32)
    low, high = np.percentile(raw, NORMALIZE_PERCENTILES)
    if high <= low:
        return np.zeros_like(raw)
    return np.clip((raw - low) / (high - low), 0.0, 1.0).astype(np.float32)


def scale_to_unit(raw: np.ndarray) -> np.ndarray:
    """Fixed 16-bit range scaling, used for emptiness tests."""
    return np.asarray(raw, dtype=np.float32) / U16_MAX


def crop(volume: Volume, origin: tuple[int, int, int], block_size: int) -> np.ndarray:
    """Raw intensities of one block."""
    x, y, z = origin
    if any(o < 0 or o + block_size > n for o, n in zip(origin, volume.dims, strict=True)):
        raise DimensionError(f"block at {origin} of size {block_size} leaves volume {volume.dims}")
    return volume.data[x : x + block_size, y : y + block_size, z : z + block_size]


def extract_block(volume: Volume, origin: tuple[int, int, int], block_size: int = 64) -> Block:
    return Block(tuple(int(o) for o in origin), normalize(crop(volume, origin, block_size)))  # type: ignore[arg-type]


def is_empty_block(
    block: Block | np.ndarray, fg_threshold: float, min_fraction: float
) -> bool:
    """True when fewer than ``min_fraction`` of voxels exceed ``fg_threshold``."""
    data = block.data if isinstance(block, Block) else np.asarray(block)
    return bool(np.count_nonzero(data > fg_threshold) < min_fraction * data.size)


def required_upsample(dims: Dims, block_size: int) -> int:
    """Smallest power-of-two factor that makes every axis hold one block."""
    factor = 1
    while min(dims) * factor < block_size:
        factor *= 2
    return factor


def suggest_upsample_factor(
    forest: SwcForest, min_radius: float = 6.0, max_factor: int = 8
) -> int:
    """Power-of-two magnification bringing the median radius to ``min_radius`` voxels.

    Thin processes of one or two voxels are lost once a block is reduced to
    its token grid, so the image is magnified until typical radii are wide
    enough, up to ``max_factor``.
    """
    median = forest.median_radius()
    factor = 1
    while median > 0 and median * factor < min_radius and factor < max_factor:
        factor *= 2
    return factor
