from __future__ import annotations

import numpy as np
import pytest

from layerqe import autodiff as ad
from layerqe.autodiff import Tensor
from layerqe.errors import ShapeError

GRAD_TOL = 1e-4


def _param(rng: np.random.Generator, *shape: int, name: str = "p") -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype="float64", name=name)


class TestPrecision:
    def test_default_is_float32(self) -> None:
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_switches_and_restores(self) -> None:
        with ad.precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_precision_rejects_integer_dtype(self) -> None:
        with pytest.raises(ValueError):
            with ad.precision("int32"):
                pass


class TestGradients:
    """Analytic gradients agree with central differences in float64."""

    def test_matmul_and_add(self, rng: np.random.Generator) -> None:
        x = _param(rng, 3, 4, name="x")
        w = _param(rng, 4, 5, name="w")
        b = _param(rng, 5, name="b")
        target = rng.normal(size=(3, 5))

        def loss() -> Tensor:
            return ad.mse_loss(ad.matmul(x, w) + b, target)

        assert ad.gradient_check(loss, [x, w, b]) < GRAD_TOL

    def test_batched_matmul(self, rng: np.random.Generator) -> None:
        a = _param(rng, 2, 3, 4, name="a")
        b = _param(rng, 2, 4, 3, name="b")
        target = rng.normal(size=(2, 3, 3))

        def loss() -> Tensor:
            return ad.mse_loss(ad.matmul(a, b), target)

        assert ad.gradient_check(loss, [a, b]) < GRAD_TOL

    @pytest.mark.parametrize("activation", ["silu", "gelu"])
    def test_activations(self, rng: np.random.Generator, activation: str) -> None:
        x = _param(rng, 4, 6)
        target = rng.normal(size=(4, 6))

        def loss() -> Tensor:
            return ad.mse_loss(ad.ACTIVATIONS[activation](x), target)

        assert ad.gradient_check(loss, [x]) < GRAD_TOL

    def test_masked_softmax(self, rng: np.random.Generator) -> None:
        x = _param(rng, 2, 5)
        mask = np.array([[True, True, False, True, False], [True, True, True, True, True]])
        target = rng.normal(size=(2, 5))

        def loss() -> Tensor:
            return ad.mse_loss(ad.softmax(x, axis=-1, mask=mask), target)

        assert ad.gradient_check(loss, [x]) < GRAD_TOL

    def test_rms_norm(self, rng: np.random.Generator) -> None:
        x = _param(rng, 3, 6, name="x")
        w = _param(rng, 6, name="w")
        target = rng.normal(size=(3, 6))

        def loss() -> Tensor:
            return ad.mse_loss(ad.rms_norm(x, w), target)

        assert ad.gradient_check(loss, [x, w]) < GRAD_TOL

    def test_embedding_and_select_positions(self, rng: np.random.Generator) -> None:
        table = _param(rng, 7, 3)
        ids = np.array([[1, 2, 2], [0, 6, 1]])
        positions = np.array([2, 1])
        target = rng.normal(size=(2, 3))

        def loss() -> Tensor:
            return ad.mse_loss(ad.select_positions(ad.embedding(table, ids), positions), target)

        assert ad.gradient_check(loss, [table]) < GRAD_TOL

    def test_reshape_transpose_concat(self, rng: np.random.Generator) -> None:
        a = _param(rng, 2, 6, name="a")
        b = _param(rng, 2, 6, name="b")
        target = rng.normal(size=(4, 3, 2))

        def loss() -> Tensor:
            joined = ad.concat([a, b], axis=0)
            return ad.mse_loss(ad.transpose(ad.reshape(joined, (4, 2, 3)), (0, 2, 1)), target)

        assert ad.gradient_check(loss, [a, b]) < GRAD_TOL

    def test_scalar_weighting(self, rng: np.random.Generator) -> None:
        raw = _param(rng, 3, name="raw")
        h = [_param(rng, 4, 2, name=f"h{i}") for i in range(3)]
        target = rng.normal(size=(4, 2))

        def loss() -> Tensor:
            alpha = ad.softmax(raw)
            total = ad.mul(alpha[0], h[0])
            for k in (1, 2):
                total = total + ad.mul(alpha[k], h[k])
            return ad.mse_loss(total / 2.0, target)

        assert ad.gradient_check(loss, [raw, *h]) < GRAD_TOL


class TestGraph:
    def test_shared_node_accumulates(self) -> None:
        x = Tensor([2.0], requires_grad=True, dtype="float64")
        y = x * x  # d/dx = 2x
        ad.backward(ad.sum(y + y))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_backward_twice_accumulates(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True, dtype="float64")
        ad.backward(ad.sum(ad.scale(x, 3.0)))
        ad.backward(ad.sum(ad.scale(x, 3.0)))
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_no_grad_records_nothing(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.no_grad():
            y = ad.sum(x * x)
        assert not y.requires_grad
        assert y.is_leaf

    def test_backward_needs_scalar(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(x * x)


class TestShapeErrors:
    def test_mismatched_elementwise(self) -> None:
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_matmul_inner_dimension(self) -> None:
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_mse_shapes(self) -> None:
        with pytest.raises(ShapeError):
            ad.mse_loss(Tensor(np.ones(3)), np.ones(4))

    def test_softmax_of_empty(self) -> None:
        with pytest.raises(ShapeError):
            ad.softmax(Tensor(np.ones((2, 0))))

    def test_division_by_zero(self) -> None:
        with pytest.raises(ZeroDivisionError):
            _ = Tensor([1.0]) / 0.0


def test_softmax_masked_entries_are_exactly_zero() -> None:
    x = Tensor(np.array([[1.0, 5.0, 2.0]]))
    y = ad.softmax(x, mask=np.array([[True, False, True]])).numpy()
    assert y[0, 1] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-6)


def test_global_grad_norm() -> None:
    a = Tensor([3.0], requires_grad=True)
    b = Tensor([4.0], requires_grad=True)
    a.grad = np.array([3.0], dtype=np.float32)
    b.grad = np.array([4.0], dtype=np.float32)
    assert ad.global_grad_norm([a, b]) == pytest.approx(5.0)
