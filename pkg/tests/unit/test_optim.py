from __future__ import annotations

import numpy as np
import pytest

from layerqe.autodiff import Tensor
from layerqe.data import EmbeddingDump
from layerqe.errors import ConfigError
from layerqe.heads import HeadStrategy
from layerqe.optim import AdamState, Optimizer, adamw_step, clip_grad_norm
from layerqe.train import DumpFeatures, TrainConfig, train


def _param(values, grad) -> Tensor:
    p = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestAdamW:
    def test_first_step(self) -> None:
        """Decay first, then a bias-corrected step of exactly ``lr`` in the gradient's direction."""
        p = _param([1.0], [0.5])
        adamw_step([p], [p.grad], AdamState(), lr=0.1, weight_decay=0.01)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.01 - 0.1, abs=1e-7)

    def test_decay_is_decoupled_from_gradient_scale(self) -> None:
        small, large = _param([2.0], [1e-3]), _param([2.0], [1e3])
        adamw_step([small], [small.grad], AdamState(), lr=0.01, weight_decay=0.5)
        adamw_step([large], [large.grad], AdamState(), lr=0.01, weight_decay=0.5)
        assert small.data[0] == pytest.approx(large.data[0], abs=1e-6)

    def test_state_accumulates(self) -> None:
        p = _param([0.0, 0.0], [1.0, -1.0])
        state = AdamState()
        for _ in range(3):
            adamw_step([p], [p.grad], state, lr=0.1)
        assert state.step == 3
        np.testing.assert_allclose(p.data, [-0.3, 0.3], atol=1e-6)

    def test_missing_gradient_is_skipped(self) -> None:
        p = _param([1.0], [0.0])
        adamw_step([p], [None], AdamState(), lr=0.1, weight_decay=0.5)
        assert p.data[0] == 1.0

    def test_shape_mismatch(self) -> None:
        p = _param([1.0, 2.0], [0.0, 0.0])
        with pytest.raises(ConfigError):
            adamw_step([p], [np.zeros(3)], AdamState(), lr=0.1)


class TestClip:
    def test_scales_to_max_norm(self) -> None:
        a, b = _param([0.0], [3.0]), _param([0.0], [4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8], rtol=1e-6)

    def test_below_threshold_untouched(self) -> None:
        a = _param([0.0], [0.3])
        clip_grad_norm([a], 1.0)
        assert a.grad[0] == 0.3


class TestOptimizer:
    def test_sgd_step(self) -> None:
        p = _param([1.0, -1.0], [0.5, 0.25])
        Optimizer([p], "sgd", lr=0.2).step()
        np.testing.assert_allclose(p.data, [0.9, -1.05])

    def test_zero_grad(self) -> None:
        p = _param([1.0], [0.5])
        Optimizer([p]).zero_grad()
        assert p.grad[0] == 0.0

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": -1.0}, {"weight_decay": -0.1}])
    def test_invalid(self, kwargs) -> None:
        with pytest.raises(ConfigError):
            Optimizer([_param([1.0], [0.0])], **kwargs)

    def test_unknown_kind(self) -> None:
        with pytest.raises(ValueError):
            Optimizer([_param([1.0], [0.0])], "lbfgs")


def test_full_batch_sgd_recovers_least_squares(rng: np.random.Generator) -> None:
    """A one-layer vanilla head trained to convergence is the OLS solution."""
    X = rng.normal(size=(64, 8)).astype(np.float32)
    y = X.astype(np.float64) @ rng.normal(size=8) + 0.1 * rng.normal(size=64)
    dump = EmbeddingDump((0,), 1, X[:, None, :], y, ("p",) * 64)
    cfg = TrainConfig(
        strategy=HeadStrategy.vanilla(-1),
        epochs=500,
        batch_size=64,
        learning_rate=0.1,
        optimizer="sgd",
        grad_clip=None,
        normalization="none",
    )
    result = train(DumpFeatures(dump, dtype="float64"), cfg)
    expected, *_ = np.linalg.lstsq(X.astype(np.float64), y, rcond=None)
    np.testing.assert_allclose(result.head.weight.data, expected, atol=1e-3)
    assert result.report.steps == 500
    assert result.report.adapter_parameters == 0
