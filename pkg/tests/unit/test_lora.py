from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from layerqe import autodiff as ad
from layerqe import lora
from layerqe.autodiff import Tensor
from layerqe.errors import ConfigError, ShapeError
from layerqe.heads import HeadStrategy, build_head
from layerqe.lora import LoraConfig
from layerqe.transformer import PROJECTIONS, TransformerConfig, TransformerModel


def _ids(rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 258, size=(2, 6))


def _randomise_b(adapters, rng: np.random.Generator, std: float = 0.05) -> None:
    for adapter in adapters.values():
        adapter.B.data = rng.normal(0.0, std, size=adapter.B.shape).astype(adapter.B.dtype)


class TestConfig:
    def test_defaults_target_attention(self) -> None:
        assert LoraConfig().targets == ("q_proj", "k_proj", "v_proj", "o_proj")

    @pytest.mark.parametrize(
        "kwargs",
        [{"rank": 0}, {"targets": ()}, {"targets": ("q_proj", "lm_head")}, {"targets": ("q_proj", "q_proj")}],
    )
    def test_invalid(self, kwargs) -> None:
        with pytest.raises(ConfigError):
            LoraConfig(**kwargs)

    def test_dict_round_trip(self) -> None:
        cfg = LoraConfig(rank=3, scale=0.5, targets=("v_proj", "down_proj"))
        assert LoraConfig.from_dict(cfg.to_dict()) == cfg


class TestInject:
    def test_fresh_adapters_leave_the_function_unchanged(
        self, tiny_config: TransformerConfig, rng: np.random.Generator
    ) -> None:
        model = TransformerModel(tiny_config, seed=2)
        ids = _ids(rng)
        before = model.forward(ids)
        lora.inject(model, LoraConfig(rank=4), seed=9)
        after = model.forward(ids)
        for a, b in zip(before.hidden_states, after.hidden_states):
            np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_base_is_frozen_and_adapters_train(self, tiny_config: TransformerConfig) -> None:
        model = TransformerModel(tiny_config, trainable=True)
        adapters = lora.inject(model, LoraConfig(rank=2))
        assert not any(p.requires_grad for p in model.parameters())
        assert all(p.requires_grad for p in lora.adapter_parameters(adapters))
        assert all(not a.B.data.any() for a in adapters.values())

    def test_only_targets_are_adapted(self, tiny_config: TransformerConfig) -> None:
        model = TransformerModel(tiny_config)
        adapters = lora.inject(model, LoraConfig(rank=2, targets=("v_proj", "up_proj")))
        assert sorted({name.rsplit(".", 1)[1] for name in adapters}) == ["up_proj", "v_proj"]
        assert len(adapters) == 2 * tiny_config.n_layers

    def test_rank_above_projection_width(self, tiny_config: TransformerConfig) -> None:
        with pytest.raises(ConfigError):
            lora.inject(TransformerModel(tiny_config), LoraConfig(rank=tiny_config.d_model + 1))

    def test_remove_restores_base(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config)
        ids = _ids(rng)
        expected = model.forward(ids).final_token_states(-1).numpy()
        _randomise_b(lora.inject(model, LoraConfig(rank=2)), rng)
        lora.remove(model)
        np.testing.assert_array_equal(model.forward(ids).final_token_states(-1).numpy(), expected)


class TestParameterCount:
    def test_attention_only(self) -> None:
        config = TransformerConfig(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=300)
        cfg = LoraConfig(rank=4)
        adapters = lora.inject(TransformerModel(config), cfg)
        # 2 layers x 4 projections x 4 * (16 + 16)
        assert lora.adapter_parameter_count(adapters) == 1024
        assert lora.expected_parameter_count(config, cfg) == 1024

    def test_every_projection(self, tiny_config: TransformerConfig) -> None:
        cfg = LoraConfig(rank=3, targets=PROJECTIONS)
        adapters = lora.inject(TransformerModel(tiny_config), cfg)
        assert lora.adapter_parameter_count(adapters) == lora.expected_parameter_count(tiny_config, cfg)


class TestMerge:
    def test_merged_model_matches_adapted(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config, seed=4)
        _randomise_b(lora.inject(model, LoraConfig(rank=4, scale=2.0, targets=PROJECTIONS)), rng)
        ids = _ids(rng)
        adapted = model.forward(ids)
        merged = lora.merged_model(model).forward(ids)
        for a, b in zip(adapted.hidden_states, merged.hidden_states):
            np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=1e-4, atol=1e-5)

    def test_merge_leaves_base_weights_alone(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config)
        digest = model.digest()
        _randomise_b(lora.inject(model, LoraConfig(rank=2)), rng)
        merged = lora.merged_model(model)
        assert model.digest() == digest
        assert merged.digest() != digest

    def test_merge_is_w_plus_scaled_ba(self, rng: np.random.Generator) -> None:
        A = rng.normal(size=(2, 5))
        B = rng.normal(size=(3, 2))
        adapter = lora.LoraAdapter("x", 5, 3, 2, 0.5, A, B)
        W = rng.normal(size=(3, 5))
        np.testing.assert_allclose(lora.merge(adapter, W), W + 0.5 * B @ A)

    def test_merge_shape_mismatch(self, rng: np.random.Generator) -> None:
        adapter = lora.LoraAdapter("x", 5, 3, 2, 1.0, rng.normal(size=(2, 5)), rng.normal(size=(3, 2)))
        with pytest.raises(ShapeError):
            lora.merge(adapter, np.zeros((5, 3)))


def test_adapter_gradient_check(f64_config: TransformerConfig, rng: np.random.Generator) -> None:
    model = TransformerModel(f64_config, seed=3)
    adapters = lora.inject(model, LoraConfig(rank=2, init_std=0.3, targets=("q_proj", "v_proj", "down_proj")))
    _randomise_b(adapters, rng, std=0.3)
    ids = rng.integers(0, 258, size=(2, 4))
    weight = Tensor(rng.normal(size=(f64_config.d_model, 1)), dtype="float64")
    target = rng.normal(size=(2, 1))

    def loss() -> Tensor:
        return ad.mse_loss(ad.matmul(model.forward(ids).final_token_states(-1), weight), target)

    with ad.precision("float64"):
        assert ad.gradient_check(loss, lora.adapter_parameters(adapters)) < 1e-4


@pytest.mark.slow
@pytest.mark.parametrize(
    "strategy",
    [
        HeadStrategy.vanilla(-1),
        HeadStrategy("dynamic", (-1, -2, -4)),
        HeadStrategy("multihead", (-1, -3), (2.0, 1.0)),
    ],
    ids=["vanilla", "dynamic", "multihead"],
)
def test_full_model_gradient_check(strategy: HeadStrategy, rng: np.random.Generator) -> None:
    config = TransformerConfig(
        n_layers=4, d_model=32, n_heads=4, d_ff=48, vocab_size=300, max_seq_len=8, init_std=0.2, dtype="float64"
    )
    model = TransformerModel(config, seed=5)
    adapters = lora.inject(model, LoraConfig(rank=4, init_std=0.2))
    _randomise_b(adapters, rng, std=0.2)
    head = build_head(strategy, config.d_model, seed=2, dtype="float64")
    for p in head.parameters():
        p.data = rng.normal(0.0, 0.5, size=p.shape)
    ids = rng.integers(0, 258, size=(2, 5))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    targets = rng.normal(size=2)

    params = head.parameters() + lora.adapter_parameters(adapters)
    assert len(params) == len(head.parameters()) + 2 * 4 * config.n_layers
    with ad.precision("float64"):
        assert ad.gradient_check(lambda: head.loss(model.forward(ids, mask), targets), params) <= 1e-4


def test_save_load_round_trip(tiny_config: TransformerConfig, rng: np.random.Generator, tmp_path: Path) -> None:
    model = TransformerModel(tiny_config, seed=6)
    cfg = LoraConfig(rank=2, targets=("k_proj", "gate_proj"))
    adapters = lora.inject(model, cfg)
    _randomise_b(adapters, rng)
    ids = _ids(rng)
    expected = model.forward(ids).final_token_states(-2).numpy()

    path = lora.save_adapters(tmp_path / "lora.lqck", adapters, cfg)
    fresh = TransformerModel(tiny_config, seed=6)
    loaded_cfg, adapters = lora.load_adapters(path, fresh)
    assert loaded_cfg == cfg
    assert len(adapters) == 2 * tiny_config.n_layers
    np.testing.assert_allclose(fresh.forward(ids).final_token_states(-2).numpy(), expected, rtol=1e-6)
