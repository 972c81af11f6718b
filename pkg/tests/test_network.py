"""Tests for the point-set transformer and its checkpoints."""

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from nrtr.autodiff import Tensor, backward, tensor_sum
from nrtr.config import LossWeights, ModelConfig
from nrtr.errors import CheckpointError, ConfigError, ConfigMismatchError, ShapeError
from nrtr.matching import PointSet, set_loss
from nrtr.network import (
    BACKBONE,
    TRANSFORMER,
    PointSetTransformer,
    build_model,
    forward,
    load_checkpoint,
    parameter_count,
    parameter_groups,
    positional_encoding,
    predict_points,
    save_checkpoint,
)
from nrtr.volume import Block

from .fixtures import tiny_model_config


GT_POINTS = np.array([[0.25, 0.5, 0.75, 0.1, 1.0], [0.625, 0.375, 0.5, 0.15, 1.0]])


@pytest.fixture
def blocks(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0, 1, size=(2, 16, 16, 16)).astype(np.float32)


class TestModelConfig:
    """Architecture validation."""

    @pytest.mark.parametrize(
        "overrides",
        [{"channels": 14}, {"downsample": 6}, {"block_size": 20}, {"heads": 5}],
    )
    def test_invalid_configs(self, overrides: dict[str, int]) -> None:
        """Channel, head and stride constraints are enforced."""
        with pytest.raises(ValidationError):
            tiny_model_config(**overrides)

    def test_derived_sizes(self, model_cfg: ModelConfig) -> None:
        """Grid, token count and default widths follow from the config."""
        assert model_cfg.grid == 2
        assert model_cfg.token_count == 8
        assert ModelConfig().mlp_width == 4 * 192
        assert ModelConfig().head_width == 192

    def test_block_smaller_than_backbone_stride(self) -> None:
        """The backbone needs blocks divisible by its deepest stride."""
        with pytest.raises(ConfigError):
            build_model(tiny_model_config(block_size=4, downsample=2))


class TestPositionalEncoding:
    """Fixed sinusoidal token encoding."""

    def test_shape_and_distinct_rows(self, model_cfg: ModelConfig) -> None:
        """One distinct row per token."""
        table = positional_encoding(model_cfg)
        assert table.shape == (8, 12)
        assert len(np.unique(table, axis=0)) == 8

    def test_token_order(self, model_cfg: ModelConfig) -> None:
        """z varies fastest; the first third encodes x."""
        table = positional_encoding(model_cfg)
        np.testing.assert_array_equal(table[0], [0, 1, 0, 1] * 3)
        np.testing.assert_array_equal(table[1, :4], table[0, :4])
        np.testing.assert_array_equal(table[1, :8], table[0, :8])
        assert not np.array_equal(table[1, 8:], table[0, 8:])
        assert not np.array_equal(table[4, :4], table[0, :4])


class TestModel:
    """Forward pass and parameters."""

    def test_output_shape_and_range(
        self, tiny_model: PointSetTransformer, blocks: np.ndarray
    ) -> None:
        """(B, N, 5) values strictly inside (0, 1)."""
        out = tiny_model(blocks[:, None])
        assert out.shape == (2, 8, 5)
        assert np.all(out.data > 0)
        assert np.all(out.data < 1)

    def test_tokens(self, tiny_model: PointSetTransformer, blocks: np.ndarray) -> None:
        """The backbone yields grid^3 tokens of C channels."""
        assert tiny_model.tokens(Tensor(blocks[:1, None])).shape == (1, 8, 12)

    @pytest.mark.parametrize("shape", [(1, 16, 16, 16), (1, 1, 8, 8, 8), (1, 2, 16, 16, 16)])
    def test_wrong_input_shape(self, tiny_model: PointSetTransformer, shape: tuple[int, ...]) -> None:
        """Inputs must be (B, 1, S, S, S)."""
        with pytest.raises(ShapeError):
            tiny_model(np.zeros(shape, dtype=np.float32))

    def test_deterministic_initialization(self, model_cfg: ModelConfig) -> None:
        """The same seed gives the same parameters; another seed does not."""
        a = dict(build_model(model_cfg, seed=3).named_parameters())
        b = dict(build_model(model_cfg, seed=3).named_parameters())
        c = dict(build_model(model_cfg, seed=4).named_parameters())
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        assert not np.array_equal(a["queries"].data, c["queries"].data)

    def test_parameter_names_and_groups(self, tiny_model: PointSetTransformer) -> None:
        """Names are unique and set; the backbone and fusion form one group."""
        named = list(tiny_model.named_parameters())
        assert len({name for name, _ in named}) == len(named)
        assert all(p.name == name for name, p in named)
        groups = parameter_groups(tiny_model)
        assert set(groups) == {BACKBONE, TRANSFORMER}
        assert sum(len(g) for g in groups.values()) == len(named)
        for name, p in named:
            expected = BACKBONE if name.startswith(("backbone.", "fusion.")) else TRANSFORMER
            assert p.group == expected, name
        assert parameter_count(tiny_model) == sum(p.data.size for _, p in named)

    def test_queries_distinct(self, tiny_model: PointSetTransformer) -> None:
        """Learned queries start pairwise distinct."""
        assert len(np.unique(tiny_model.queries.data, axis=0)) == 8

    def test_every_parameter_receives_gradient(
        self, tiny_model: PointSetTransformer, blocks: np.ndarray
    ) -> None:
        """The whole network is connected to the output."""
        backward(tensor_sum(tiny_model(blocks[:1, None])))
        missing = [name for name, p in tiny_model.named_parameters() if p.grad is None]
        assert missing == []

    def test_forward_and_predict_points(
        self, tiny_model: PointSetTransformer, blocks: np.ndarray
    ) -> None:
        """Single-block and batched prediction agree."""
        single = forward(tiny_model, Block((0, 0, 0), blocks[1]))
        batch = predict_points(tiny_model, blocks)
        assert len(batch) == 2
        assert single.is_prediction
        assert len(single) == 8
        np.testing.assert_allclose(single.points, batch[1].points, atol=1e-5)


class TestEndToEnd:
    """Properties of the loss taken through the whole network."""

    @pytest.mark.slow
    def test_sampled_parameter_gradients(self, model_cfg: ModelConfig) -> None:
        """Gradients of set_loss for 1% of the parameters match central differences."""
        model = build_model(model_cfg, seed=2, dtype=np.float64)
        rng = np.random.default_rng(5)
        block = rng.uniform(0, 1, size=(1, 1, 16, 16, 16))
        gt = PointSet.ground_truth(GT_POINTS)
        weights = LossWeights()

        def loss_value() -> float:
            return set_loss(gt, model(block)[0], weights).total.item()

        backward(set_loss(gt, model(block)[0], weights).total)
        params = model.parameters()
        sizes = np.array([p.data.size for p in params])
        offsets = np.cumsum(sizes) - sizes
        picks = rng.choice(int(sizes.sum()), size=max(1, int(sizes.sum()) // 100), replace=False)
        eps = 1e-6
        worst = 0.0
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right")) - 1
            param = params[k]
            index = np.unravel_index(int(flat - offsets[k]), param.data.shape)
            analytic = float(param.grad[index]) if param.grad is not None else 0.0
            original = float(param.data[index])
            param.data[index] = original + eps
            up = loss_value()
            param.data[index] = original - eps
            down = loss_value()
            param.data[index] = original
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        assert worst < 1e-3

    def test_encoder_permutation_equivariance(
        self, model_cfg: ModelConfig, blocks: np.ndarray
    ) -> None:
        """Permuting encoded tokens permutes the encoder output the same way."""
        model = build_model(model_cfg, seed=1, dtype=np.float64)
        tokens = model.tokens(Tensor(blocks[:1, None], dtype=np.float64))
        perm = np.random.default_rng(0).permutation(tokens.shape[1])
        out = model.encode(tokens).data
        permuted = model.encode(Tensor(tokens.data[:, perm], dtype=np.float64)).data
        np.testing.assert_allclose(permuted, out[:, perm], rtol=0, atol=1e-10)

    @pytest.mark.slow
    def test_finite_over_seeds(self, model_cfg: ModelConfig) -> None:
        """Outputs and parameter gradients stay finite for 100 seeded models and inputs."""
        gt = PointSet.ground_truth(GT_POINTS)
        for seed in range(100):
            model = build_model(model_cfg, seed=seed)
            x = np.random.default_rng(seed).uniform(0, 1, size=(1, 1, 16, 16, 16))
            out = model(x.astype(np.float32))
            assert np.all(np.isfinite(out.data)), seed
            backward(set_loss(gt, out[0], LossWeights()).total)
            for name, param in model.named_parameters():
                assert param.grad is not None, (seed, name)
                assert np.all(np.isfinite(param.grad)), (seed, name)


class TestCheckpoint:
    """Parameter store plus config sidecar."""

    def test_round_trip(
        self, tmp_path: Path, tiny_model: PointSetTransformer, blocks: np.ndarray
    ) -> None:
        """A reloaded model predicts exactly the same points."""
        path = tmp_path / "model.bin"
        size = save_checkpoint(tiny_model, path)
        assert size == path.stat().st_size
        assert (tmp_path / "model.bin.json").exists()
        loaded = load_checkpoint(path)
        assert loaded.cfg == tiny_model.cfg
        np.testing.assert_array_equal(
            loaded(blocks[:, None]).data, tiny_model(blocks[:, None]).data
        )

    def test_config_mismatch(self, tmp_path: Path, tiny_model: PointSetTransformer) -> None:
        """A checkpoint cannot be loaded into a different architecture."""
        path = tmp_path / "model.bin"
        save_checkpoint(tiny_model, path)
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, tiny_model_config(num_queries=4))

    def test_truncated_store(self, tmp_path: Path, tiny_model: PointSetTransformer) -> None:
        """A cut-off store is rejected."""
        path = tmp_path / "model.bin"
        save_checkpoint(tiny_model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_sidecar(self, tmp_path: Path, tiny_model: PointSetTransformer) -> None:
        """Without a config the checkpoint cannot be rebuilt."""
        path = tmp_path / "model.bin"
        save_checkpoint(tiny_model, path)
        (tmp_path / "model.bin.json").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        assert load_checkpoint(path, tiny_model.cfg).cfg == tiny_model.cfg
