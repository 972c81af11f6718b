"""Tests for the tensor autodiff engine, gradient checking and the parameter store."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from nrtr import autodiff as ad
from nrtr.autodiff import Module, Parameter, Tensor, backward, grad_check
from nrtr.errors import CheckpointError, ShapeError


def weighted(op: Callable[..., Tensor], weights: np.ndarray) -> Callable[..., Tensor]:
    """Scalar sum(op(*xs) * W) for gradient checks."""
    return lambda *xs: ad.tensor_sum(op(*xs) * weights)


def check(
    op: Callable[..., Tensor],
    inputs: list[np.ndarray],
    rng: np.random.Generator,
    **kwargs: object,
) -> ad.GradCheckReport:
    shape = op(*(Tensor(x, dtype=np.float64) for x in inputs)).shape
    report = grad_check(weighted(op, rng.normal(size=shape)), inputs, **kwargs)  # type: ignore[arg-type]
    assert report.passed, report
    return report


class TestBackward:
    """Reverse-mode accumulation."""

    def test_square(self) -> None:
        """d(x^2)/dx at 3 is 6."""
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_gradients_accumulate(self) -> None:
        """A second backward pass adds to the stored gradient."""
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        backward(x * x)
        assert x.grad == pytest.approx(12.0)
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression(self) -> None:
        """A node used twice receives both contributions."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = x * 3.0
        backward(ad.tensor_sum(y * y + y))
        np.testing.assert_allclose(x.grad, 18 * x.data + 3)

    def test_constants_get_no_gradient(self) -> None:
        """Leaves without requires_grad are left alone."""
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.full(3, 2.0))
        backward(ad.tensor_sum(x * c))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_non_scalar_loss(self) -> None:
        """Only scalars can be differentiated."""
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_dtype_is_preserved(self) -> None:
        """32-bit inputs stay 32-bit through scalar arithmetic."""
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        assert (x * 2.0 + 1.0).dtype == np.float32


class TestShapes:
    """Shape validation."""

    def test_broadcast_trailing_only(self) -> None:
        """Only scalars and trailing-suffix shapes broadcast."""
        assert (Tensor(np.ones((2, 3))) + Tensor(np.ones(3))).shape == (2, 3)
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))

    def test_softmax_empty_axis(self) -> None:
        """Softmax over an empty axis is undefined."""
        with pytest.raises(ShapeError):
            ad.softmax(Tensor(np.ones((2, 0))))

    def test_matmul_mismatch(self) -> None:
        """Inner dimensions must agree."""
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_reshape_mismatch(self) -> None:
        """Element counts must agree."""
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_attention_mismatch(self) -> None:
        """Query and key widths must agree."""
        with pytest.raises(ShapeError):
            ad.scaled_dot_product_attention(
                Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))), Tensor(np.ones((5, 2)))
            )

    def test_conv_channel_mismatch(self) -> None:
        """Weight input channels must match the input."""
        with pytest.raises(ShapeError):
            ad.conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))


class TestConv3d:
    """3D convolution values and methods."""

    def test_box_filter(self) -> None:
        """A 3^3 ones kernel on ones sums 27 inside and 8 at corners."""
        out = ad.conv3d(Tensor(np.ones((1, 1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
        assert out.shape == (1, 1, 5, 5, 5)
        assert out.data[0, 0, 2, 2, 2] == 27
        assert out.data[0, 0, 0, 0, 0] == 8
        assert out.data[0, 0, 0, 2, 2] == 18

    def test_strided_shape(self) -> None:
        """Stride 2 with padding 1 halves a 6^3 input."""
        out = ad.conv3d(
            Tensor(np.ones((2, 1, 6, 6, 6))), Tensor(np.ones((4, 1, 3, 3, 3))), stride=2, padding=1
        )
        assert out.shape == (2, 4, 3, 3, 3)

    def test_methods_agree(self, rng: np.random.Generator) -> None:
        """Direct and im2col convolution give the same result."""
        x = Tensor(rng.normal(size=(2, 3, 7, 6, 5)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        for stride, padding in ((1, 0), (2, 1)):
            direct = ad.conv3d(x, w, b, stride, padding, method="direct")
            im2col = ad.conv3d(x, w, b, stride, padding, method="im2col")
            np.testing.assert_allclose(direct.data, im2col.data, atol=1e-6)

    def test_unknown_method(self) -> None:
        """Only direct and im2col exist."""
        with pytest.raises(ValueError):
            ad.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 1, 1, 1))), method="fft")


class TestGradients:
    """Analytic gradients agree with central differences."""

    def test_arithmetic_with_broadcast(self, rng: np.random.Generator) -> None:
        """add, sub, mul and div, including a broadcast operand."""
        a = rng.normal(size=(2, 3))
        b = rng.uniform(1.0, 2.0, size=3)
        check(lambda x, y: (x + y) * x - x / y, [a, b], rng)

    def test_unary(self, rng: np.random.Generator) -> None:
        """exp, log, neg, sigmoid and gelu."""
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        for op in (ad.exp, ad.log, ad.neg, ad.sigmoid, ad.gelu):
            check(op, [x], rng)

    def test_abs_and_relu_away_from_zero(self, rng: np.random.Generator) -> None:
        """Kinked ops are checked with a guard around zero."""
        x = rng.normal(size=(4, 4))
        check(ad.tensor_abs, [x], rng, kink_guard=1e-2)
        check(ad.relu, [x], rng, kink_guard=1e-2)

    def test_maximum_minimum(self, rng: np.random.Generator) -> None:
        """Both operands receive gradient where they win."""
        a = rng.normal(size=(3, 3))
        b = a + np.where(rng.random((3, 3)) > 0.5, 0.5, -0.5)
        check(ad.maximum, [a, b], rng)
        check(ad.minimum, [a, b], rng)

    def test_clip_excluding_bounds(self, rng: np.random.Generator) -> None:
        """Clip passes gradient only inside its bounds."""
        x = rng.normal(size=(5, 5))
        near = np.abs(np.abs(x) - 0.5) < 1e-2
        check(lambda t: ad.clip(t, -0.5, 0.5), [x], rng, exclude=[near])

    def test_normalizations(self, rng: np.random.Generator) -> None:
        """Softmax and layernorm along the last axis."""
        x = rng.normal(size=(3, 5))
        check(ad.softmax, [x], rng)
        check(ad.layernorm, [x], rng)
        check(lambda t: ad.softmax(t, axis=0), [x], rng)

    def test_shape_ops(self, rng: np.random.Generator) -> None:
        """reshape, transpose, concat, indexing and reductions."""
        x = rng.normal(size=(2, 3, 4))
        y = rng.normal(size=(2, 1, 4))
        check(lambda t: t.reshape(6, 4), [x], rng)
        check(lambda t: t.transpose(2, 0, 1), [x], rng)
        check(lambda t, u: ad.concat([t, u], axis=1), [x, y], rng)
        check(lambda t: t[:, 1:, ::2], [x], rng)
        check(lambda t: t[np.array([0, 1, 1])], [x], rng)
        check(lambda t: ad.tensor_sum(t, axis=1), [x], rng)
        check(lambda t: ad.mean(t, axis=(0, 2), keepdims=True), [x], rng)

    def test_embedding_lookup_repeats(self, rng: np.random.Generator) -> None:
        """Repeated rows accumulate gradient."""
        table = rng.normal(size=(5, 3))
        idx = np.array([4, 0, 4, 2])
        check(lambda t: ad.embedding_lookup(t, idx), [table], rng)
        t = Tensor(table, requires_grad=True)
        backward(ad.tensor_sum(ad.embedding_lookup(t, idx)))
        np.testing.assert_array_equal(t.grad[:, 0], [1, 0, 1, 0, 2])

    def test_upsample_nearest(self, rng: np.random.Generator) -> None:
        """Upsampling repeats voxels; its gradient sums them back."""
        x = rng.normal(size=(1, 2, 2, 3, 2))
        out = ad.upsample_nearest(Tensor(x), 2)
        assert out.shape == (1, 2, 4, 6, 4)
        assert out.data[0, 1, 3, 5, 2] == x[0, 1, 1, 2, 1]
        check(lambda t: ad.upsample_nearest(t, 2), [x], rng)

    def test_matmul(self, rng: np.random.Generator) -> None:
        """Plain, broadcast-weight and batched matrix products."""
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=(2, 4, 2))
        check(ad.matmul, [a[0], w], rng)
        check(ad.matmul, [a, w], rng)
        check(ad.matmul, [a, b], rng)

    def test_conv3d(self, rng: np.random.Generator) -> None:
        """Input, weight and bias gradients of a strided padded convolution."""
        x = rng.normal(size=(1, 2, 4, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        for method in ("direct", "im2col"):
            check(
                lambda t, k, c, m=method: ad.conv3d(t, k, c, stride=2, padding=1, method=m),
                [x, w, b],
                rng,
            )

    def test_attention(self, rng: np.random.Generator) -> None:
        """Batched multi-head attention."""
        q = rng.normal(size=(2, 3, 4))
        k = rng.normal(size=(2, 5, 4))
        v = rng.normal(size=(2, 5, 6))
        check(ad.scaled_dot_product_attention, [q, k, v], rng)


class TestGradCheck:
    """The gradient checker itself."""

    def test_kink_guard_skips(self) -> None:
        """Coordinates at the relu kink are skipped."""
        report = grad_check(
            lambda t: ad.tensor_sum(ad.relu(t)), [np.array([-1.0, 0.0, 2.0])], kink_guard=1e-6
        )
        assert report.skipped == 1
        assert report.checked == 2
        assert report.passed

    def test_detects_disagreement(self) -> None:
        """A clip evaluated on its bound disagrees with the one-sided difference."""
        x = [np.array([0.2, 1.0])]
        report = grad_check(lambda t: ad.tensor_sum(ad.clip(t, 0.0, 1.0)), x)
        assert not report.passed
        assert report.worst_index == (1,)
        excluded = grad_check(
            lambda t: ad.tensor_sum(ad.clip(t, 0.0, 1.0)), x, exclude=[np.array([False, True])]
        )
        assert excluded.passed


class Linear(Module):
    def __init__(self, width: int) -> None:
        self.weight = Parameter(np.zeros((width, width)), group="transformer")


class Stack(Module):
    def __init__(self) -> None:
        self.embed = Parameter(np.zeros(3), group="backbone")
        self.layers = [Linear(2), Linear(2)]


class TestModule:
    """Parameter discovery."""

    def test_named_parameters(self) -> None:
        """Nested modules and lists contribute dotted names."""
        names = [name for name, _ in Stack().named_parameters()]
        assert names == ["embed", "layers.0.weight", "layers.1.weight"]

    def test_zero_grad(self) -> None:
        """Every parameter loses its gradient."""
        model = Stack()
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        model.zero_grad()
        assert all(p.grad is None for p in model.parameters())


class TestParameterStore:
    """Binary parameter store."""

    def test_round_trip(self, tmp_path: Path, rng: np.random.Generator) -> None:
        """Names, shapes, float32 values and the digest survive."""
        arrays = {
            "encoder.0.weight": rng.normal(size=(2, 3)).astype(np.float32),
            "bias": rng.normal(size=4).astype(np.float32),
            "scalar": np.array(1.5, dtype=np.float32),
        }
        digest = bytes(range(32))
        path = tmp_path / "model.bin"
        size = ad.write_parameter_store(path, arrays, digest)
        assert size == path.stat().st_size
        read_digest, loaded = ad.read_parameter_store(path)
        assert read_digest == digest
        assert list(loaded) == list(arrays)
        for name, array in arrays.items():
            assert loaded[name].dtype == np.float32
            np.testing.assert_array_equal(loaded[name], array)

    def test_bad_magic(self, tmp_path: Path) -> None:
        """Files without the magic are rejected."""
        path = tmp_path / "model.bin"
        ad.write_parameter_store(path, {"w": np.ones(2, dtype=np.float32)})
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            ad.read_parameter_store(path)

    def test_truncated(self, tmp_path: Path) -> None:
        """Missing payload bytes are detected."""
        path = tmp_path / "model.bin"
        ad.write_parameter_store(path, {"w": np.ones((4, 4), dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            ad.read_parameter_store(path)
        path.write_bytes(b"NRTR")
        with pytest.raises(CheckpointError):
            ad.read_parameter_store(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        """An absent file is a checkpoint error."""
        with pytest.raises(CheckpointError):
            ad.read_parameter_store(tmp_path / "absent.bin")

    def test_digest_length(self, tmp_path: Path) -> None:
        """The digest is exactly 32 bytes."""
        with pytest.raises(ValueError):
            ad.write_parameter_store(tmp_path / "m.bin", {}, b"short")

    def test_corrupt_record_name(self, tmp_path: Path) -> None:
        """A record name that is not UTF-8 is a checkpoint error."""
        path = tmp_path / "model.bin"
        ad.write_parameter_store(path, {"w": np.ones(2, dtype=np.float32)})
        name_start = 4 + 1 + ad.DIGEST_SIZE + 4 + 2
        payload = path.read_bytes()
        path.write_bytes(payload[:name_start] + b"\xff" + payload[name_start + 1 :])
        with pytest.raises(CheckpointError, match="corrupt record name"):
            ad.read_parameter_store(path)
