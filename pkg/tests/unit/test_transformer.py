from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from layerqe import autodiff as ad
from layerqe.autodiff import Tensor
from layerqe.checkpoint import save_tensors
from layerqe.errors import CheckpointError, ConfigError, InputError, LayerIndexError
from layerqe.transformer import TransformerConfig, TransformerModel, final_token_state, resolve_layer


def _ids(rng: np.random.Generator, batch: int, seq: int, vocab: int = 258) -> np.ndarray:
    return rng.integers(0, vocab, size=(batch, seq))


class TestResolveLayer:
    @pytest.mark.parametrize(
        "index, n_layers, expected",
        [(-1, 28, 27), (-7, 28, 21), (-28, 28, 0), (0, 4, 0), (3, 4, 3), (-4, 4, 0)],
    )
    def test_resolves(self, index: int, n_layers: int, expected: int) -> None:
        assert resolve_layer(index, n_layers) == expected

    @pytest.mark.parametrize("index", [4, -5, 100, -100])
    def test_out_of_range(self, index: int) -> None:
        with pytest.raises(LayerIndexError) as exc:
            resolve_layer(index, 4)
        assert exc.value.index == index
        assert exc.value.n_layers == 4


class TestConfig:
    def test_heads_must_divide_width(self) -> None:
        with pytest.raises(ConfigError):
            TransformerConfig(d_model=10, n_heads=3)

    def test_unknown_activation(self) -> None:
        with pytest.raises(ConfigError):
            TransformerConfig(activation="relu")

    def test_dict_round_trip(self, tiny_config: TransformerConfig) -> None:
        assert TransformerConfig.from_dict(tiny_config.to_dict()) == tiny_config

    def test_unknown_keys_rejected(self) -> None:
        with pytest.raises(ConfigError):
            TransformerConfig.from_dict({"n_layers": 2, "depth": 3})


class TestForward:
    def test_trace_holds_every_layer(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config)
        trace = model.forward(_ids(rng, 3, 7))
        assert trace.n_layers == tiny_config.n_layers
        for h in trace.hidden_states:
            assert h.shape == (3, 7, tiny_config.d_model)
        assert trace.final_token_states(-1).shape == (3, tiny_config.d_model)
        assert final_token_state(trace, -2, row=1).shape == (tiny_config.d_model,)

    def test_final_token_is_last_position(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config)
        trace = model.forward(_ids(rng, 2, 5))
        np.testing.assert_array_equal(trace.final_token_states(-1).numpy(), trace.layer(-1).numpy()[:, -1, :])

    def test_causal(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        """Changing token t leaves every earlier position untouched, in every layer."""
        model = TransformerModel(tiny_config)
        ids = _ids(rng, 1, 9)
        changed = ids.copy()
        changed[0, 5] = (changed[0, 5] + 1) % 258
        a = model.forward(ids)
        b = model.forward(changed)
        for ha, hb in zip(a.hidden_states, b.hidden_states):
            np.testing.assert_allclose(ha.numpy()[:, :5], hb.numpy()[:, :5], atol=1e-6)
            assert not np.allclose(ha.numpy()[:, 5:], hb.numpy()[:, 5:])

    def test_right_padding_does_not_leak(self, tiny_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(tiny_config)
        short = _ids(rng, 1, 4)
        padded = np.concatenate([short, _ids(rng, 1, 3)], axis=1)
        mask = np.array([[True] * 4 + [False] * 3])
        alone = model.forward(short)
        batched = model.forward(padded, mask)
        for layer in range(-tiny_config.n_layers, 0):
            np.testing.assert_allclose(
                alone.final_token_states(layer).numpy(), batched.final_token_states(layer).numpy(), atol=1e-5
            )

    def test_single_sequence_input(self, tiny_config: TransformerConfig) -> None:
        trace = TransformerModel(tiny_config).forward([257, 10, 11])
        assert trace.batch_size == 1

    @pytest.mark.parametrize(
        "ids, mask",
        [
            (np.array([[1, 2, 3]]), np.array([[False, True, True]])),  # left padding
            (np.array([[1, 2, 3]]), np.array([[False, False, False]])),  # empty row
            (np.array([[1, 2, 300]]), None),  # id outside the vocabulary
            (np.zeros((1, 65), dtype=np.int64), None),  # longer than max_seq_len
            (np.array([[1.0, 2.0]]), None),  # not integers
        ],
    )
    def test_invalid_inputs(self, tiny_config: TransformerConfig, ids: np.ndarray, mask) -> None:
        with pytest.raises(InputError):
            TransformerModel(tiny_config).forward(ids, mask)

    def test_same_seed_same_weights(self, tiny_config: TransformerConfig) -> None:
        assert TransformerModel(tiny_config, seed=3).digest() == TransformerModel(tiny_config, seed=3).digest()
        assert TransformerModel(tiny_config, seed=3).digest() != TransformerModel(tiny_config, seed=4).digest()


class TestGradientFlow:
    @pytest.mark.parametrize("layer", [-1, -3])
    def test_layers_above_the_head_get_no_gradient(
        self, tiny_config: TransformerConfig, rng: np.random.Generator, layer: int
    ) -> None:
        model = TransformerModel(tiny_config, trainable=True)
        weight = Tensor(rng.normal(size=(tiny_config.d_model, 1)).astype(np.float32))
        trace = model.forward(_ids(rng, 2, 6))
        pred = ad.matmul(trace.final_token_states(layer), weight)
        ad.backward(ad.mse_loss(pred, np.ones((2, 1), dtype=np.float32)))

        cut = resolve_layer(layer, tiny_config.n_layers)
        for block in model.layers:
            for name, p in block.named_parameters().items():
                if block.index > cut:
                    assert not p.grad.any(), name
                else:
                    assert p.grad.any(), name
        assert model.embed_tokens.grad.any()

    def test_gradient_check(self, f64_config: TransformerConfig, rng: np.random.Generator) -> None:
        model = TransformerModel(f64_config, seed=1, trainable=True)
        ids = rng.integers(0, 258, size=(2, 5))
        mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
        weight = Tensor(rng.normal(size=(f64_config.d_model, 1)), dtype="float64")
        target = rng.normal(size=(2, 1))
        named = model.named_parameters()
        params = [named[n] for n in ("layers.0.q_proj", "layers.0.attn_norm", "layers.1.down_proj", "layers.1.v_proj")]

        def loss() -> Tensor:
            trace = model.forward(ids, mask)
            return ad.mse_loss(ad.matmul(trace.final_token_states(-1), weight), target)

        with ad.precision("float64"):
            assert ad.gradient_check(loss, params, max_entries=6) < 1e-4


class TestPersistence:
    def test_save_load_round_trip(self, tiny_config: TransformerConfig, tmp_path: Path) -> None:
        model = TransformerModel(tiny_config, seed=5)
        path = model.save(tmp_path / "base.lqck")
        loaded = TransformerModel.load(path)
        assert loaded.config == tiny_config
        assert loaded.digest() == model.digest()

    @pytest.mark.parametrize(
        "meta",
        [{"kind": "transformer"}, {"kind": "transformer", "config": {"n_layers": 2, "depth": 9}}],
        ids=["missing", "unknown-key"],
    )
    def test_load_rejects_a_bad_config(self, tiny_config: TransformerConfig, tmp_path: Path, meta) -> None:
        path = save_tensors(tmp_path / "base.lqck", TransformerModel(tiny_config).state_dict(), meta)
        with pytest.raises(CheckpointError, match="config"):
            TransformerModel.load(path)

    def test_clone_is_independent(self, tiny_config: TransformerConfig) -> None:
        model = TransformerModel(tiny_config, seed=5)
        twin = model.clone()
        assert twin.digest() == model.digest()
        twin.embed_tokens.data += 1.0
        assert twin.digest() != model.digest()

    def test_load_state_dict_rejects_wrong_shapes(self, tiny_config: TransformerConfig) -> None:
        model = TransformerModel(tiny_config)
        state = model.state_dict()
        state["embed_tokens"] = state["embed_tokens"][:10]
        with pytest.raises(CheckpointError):
            model.load_state_dict(state)

    def test_load_state_dict_rejects_missing_names(self, tiny_config: TransformerConfig) -> None:
        model = TransformerModel(tiny_config)
        state = model.state_dict()
        del state["layers.0.q_proj"]
        with pytest.raises(CheckpointError):
            model.load_state_dict(state)
