"""Builders for forests, volumes and tiny model configurations used across tests."""

from pathlib import Path

import numpy as np

from nrtr.config import (
    ConnectConfig,
    ModelConfig,
    RenderSpec,
    SynthConfig,
    SynthSpec,
    TrainConfig,
)
from nrtr.swc import ROOT_PARENT, SwcForest, SwcNode
from nrtr.volume import Volume, save_volume

TWO_NODE_SWC = "1 1 5 5 5 2 -1\n2 3 7 5 5 1 1\n"


def chain_forest(
    count: int = 3,
    spacing: float = 2.0,
    radius: float = 1.5,
    start: tuple[float, float, float] = (5.5, 5.5, 5.5),
    first_id: int = 1,
) -> SwcForest:
    """A single straight chain along x, rooted at ``start``."""
    nodes = []
    for k in range(count):
        node_id = first_id + k
        parent = ROOT_PARENT if k == 0 else node_id - 1
        centre = (start[0] + k * spacing, start[1], start[2])
        nodes.append(SwcNode(node_id, 3, centre, radius, parent))
    return SwcForest(tuple(nodes))


def single_node(
    centre: tuple[float, float, float], radius: float, node_id: int = 1
) -> SwcForest:
    return SwcForest((SwcNode(node_id, 1, centre, radius),))


def dyadic(forest: SwcForest) -> SwcForest:
    """Round centres and radii to multiples of 0.25 so symmetry checks are exact."""
    return forest.map_nodes(
        lambda n: SwcNode(
            n.id,
            n.tag,
            tuple(round(c * 4) / 4 for c in n.center),  # type: ignore[arg-type]
            round(n.radius * 4) / 4,
            n.parent_id,
        )
    )


def write_constant_volume(
    path: Path, dims: tuple[int, int, int], value: float, dtype: str = "u16"
) -> Path:
    save_volume(Volume(np.full(dims, value, dtype=np.float32), dtype=dtype), path)
    return path


def write_raw_container(
    stem: Path, dims: tuple[int, int, int], dtype: str, payload: bytes
) -> None:
    """Hand-written container, bypassing save_volume."""
    stem.with_name(stem.name + ".json").write_text(
        '{"dims": [%d, %d, %d], "dtype": "%s", "spacing": [1, 1, 1], "order": "x-fastest"}'
        % (*dims, dtype),
        encoding="utf-8",
    )
    stem.with_name(stem.name + ".raw").write_bytes(payload)


def tiny_model_config(**overrides: object) -> ModelConfig:
    """A 16^3 model small enough to train in a test."""
    values: dict[str, object] = {
        "block_size": 16,
        "channels": 12,
        "downsample": 8,
        "heads": 2,
        "encoder_layers": 1,
        "decoder_layers": 1,
        "num_queries": 8,
        "base_width": 4,
        "mlp_hidden": 24,
        "head_hidden": 12,
    }
    values.update(overrides)
    return ModelConfig.model_validate(values)


def tiny_train_config(**overrides: object) -> TrainConfig:
    values: dict[str, object] = {
        "epochs": 2,
        "warmup_epochs": 1,
        "batch_size": 2,
        "steps_per_epoch": 2,
        "seed": 7,
        "model": tiny_model_config(),
    }
    values.update(overrides)
    return TrainConfig.model_validate(values)


def tiny_synth_config(n_samples: int = 2, seed: int = 3) -> SynthConfig:
    dims = (16, 16, 16)
    return SynthConfig(
        synth=SynthSpec(
            dims=dims,
            n_trees=1,
            nodes_per_tree=(4, 6),
            radius_range=(1.5, 2.5),
            branch_probability=0.2,
            step_range=(2.0, 3.0),
            seed=seed,
        ),
        render=RenderSpec(dims=dims, noise_sd=200.0, psf_sigma=0.8),
        n_samples=n_samples,
        test_fraction=0.0,
    )


def tiny_connect_config(**overrides: object) -> ConnectConfig:
    values: dict[str, object] = {"block_size": 16}
    values.update(overrides)
    return ConnectConfig.model_validate(values)
