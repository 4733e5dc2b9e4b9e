"""Regression heads over final-token hidden states.

Three strategies:

* ``vanilla``   one linear head on a single layer, ``y = h_k . W_n``;
* ``dynamic``   softmax-weighted sum of several layers' ``h_k`` fed to one head;
  the per-layer taps have no parameters of their own;
* ``multihead`` one head per layer, trained on a weighted sum of their MSE
  losses and predicting with the plain mean of their outputs.

Every head reads its inputs through :class:`~layerqe.transformer.LayerStates`,
so the same head runs on a live forward trace or on an exported embedding dump.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from layerqe import autodiff as ad
from layerqe.artifacts import atomic_write_json
from layerqe.autodiff import Tensor
from layerqe.checkpoint import expect_kind, load_tensors, save_tensors
from layerqe.errors import CheckpointError, ConfigError
from layerqe.transformer import LayerStates, resolve_layer

_logger = logging.getLogger(__name__)

DEFAULT_SWEEP_LAYERS: Tuple[int, ...] = (-1, -7, -11, -16, -20, -24)
DEFAULT_LAYER_GROUPS: Tuple[Tuple[int, ...], ...] = (
    tuple(range(-1, -8, -1)),
    tuple(range(-8, -12, -1)),
    tuple(range(-12, -17, -1)),
)
HEAD_INIT_STD = 0.02


class StrategyKind(str, Enum):
    VANILLA = "vanilla"
    DYNAMIC = "dynamic"
    MULTIHEAD = "multihead"


@dataclass(frozen=True)
class HeadStrategy:
    """Which prediction strategy to build, on which layers.

    ``loss_weights`` only applies to ``multihead``; it is normalised to sum to 1
    and defaults to uniform.
    """

    kind: StrategyKind
    layers: Tuple[int, ...]
    loss_weights: Optional[Tuple[float, ...]] = None
    bias: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        if not self.layers:
            raise ConfigError("a head strategy needs at least one layer")
        if self.kind is StrategyKind.VANILLA and len(self.layers) != 1:
            raise ConfigError(f"vanilla strategy takes exactly one layer, got {list(self.layers)}")
        if self.kind is not StrategyKind.VANILLA:
            if len(self.layers) < 2:
                raise ConfigError(f"{self.kind.value} strategy needs at least two layers; use vanilla for one")
            if len(set(self.layers)) != len(self.layers):
                raise ConfigError(f"{self.kind.value} strategy layers must be distinct, got {list(self.layers)}")
        if self.loss_weights is not None:
            if self.kind is not StrategyKind.MULTIHEAD:
                raise ConfigError("loss weights only apply to the multihead strategy")
            weights = tuple(float(w) for w in self.loss_weights)
            if len(weights) != len(self.layers):
                raise ConfigError(f"{len(weights)} loss weight(s) given for {len(self.layers)} head(s)")
            if any(not w > 0 for w in weights):
                raise ConfigError(f"loss weights must be positive, got {list(weights)}")
            total = float(np.sum(weights))
            object.__setattr__(self, "loss_weights", tuple(w / total for w in weights))

    @classmethod
    def vanilla(cls, layer: int, *, bias: bool = False) -> "HeadStrategy":
        return cls(StrategyKind.VANILLA, (layer,), bias=bias)

    @property
    def label(self) -> str:
        if self.kind is StrategyKind.VANILLA:
            return f"TL({self.layers[0]})"
        return f"{self.kind.value} TL({self.layers[0]}..{self.layers[-1]})"

    def resolve(self, n_layers: int) -> Tuple[int, ...]:
        resolved = tuple(resolve_layer(x, n_layers) for x in self.layers)
        if len(set(resolved)) != len(resolved):
            raise ConfigError(f"layers {list(self.layers)} resolve to duplicates {list(resolved)} for depth {n_layers}")
        return resolved

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "layers": list(self.layers),
            "loss_weights": list(self.loss_weights) if self.loss_weights is not None else None,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HeadStrategy":
        weights = data.get("loss_weights")
        return cls(
            StrategyKind(data["kind"]),
            tuple(data["layers"]),
            tuple(weights) if weights is not None else None,
            bool(data.get("bias", False)),
        )


def _project(h: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    batch, d = h.shape
    y = ad.reshape(ad.matmul(h, ad.reshape(weight, (d, 1))), (batch,))
    return y + bias if bias is not None else y


class RegressionHead:
    """Single linear map from ``h_k`` to a scalar: ``y = h_k . W_n (+ b)``."""

    def __init__(self, layer: int, weight: np.ndarray, bias: Optional[float] = None):
        self.layer = int(layer)
        self.weight = Tensor(weight, requires_grad=True, name=f"head[{layer}].weight")
        self.bias = (
            Tensor(np.asarray(bias, dtype=self.weight.dtype), requires_grad=True, name=f"head[{layer}].bias")
            if bias is not None
            else None
        )

    @classmethod
    def initialise(
        cls, layer: int, d_model: int, rng: np.random.Generator, *, bias: bool, dtype: str
    ) -> "RegressionHead":
        weight = rng.normal(0.0, HEAD_INIT_STD, size=d_model).astype(dtype)
        return cls(layer, weight, 0.0 if bias else None)

    def named_parameters(self, prefix: str = "head") -> Dict[str, Tensor]:
        params = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            params[f"{prefix}.bias"] = self.bias
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def predict(self, states: LayerStates) -> Tensor:
        return predict_vanilla(states, self)

    def loss(self, states: LayerStates, targets: np.ndarray) -> Tensor:
        return ad.mse_loss(self.predict(states), targets)


class DynamicWeighting:
    """Softmax-weighted combination of several layers' final-token states."""

    def __init__(self, layers: Sequence[int], head: RegressionHead, raw_weights: Optional[np.ndarray] = None):
        layers = tuple(int(x) for x in layers)
        if len(layers) < 2:
            raise ConfigError("dynamic weighting needs at least two layers; use a vanilla head for one")
        if len(set(layers)) != len(layers):
            raise ConfigError(f"dynamic weighting layers must be distinct, got {list(layers)}")
        if raw_weights is None:
            raw_weights = np.zeros(len(layers), dtype=head.weight.dtype)
        if np.shape(raw_weights) != (len(layers),):
            raise ConfigError(f"{np.shape(raw_weights)} raw weights for {len(layers)} layers")
        self.layers = layers
        self.head = head
        self.raw_weights = Tensor(raw_weights, requires_grad=True, name="dynamic.raw_weights")

    def alphas(self) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax(self.raw_weights).numpy()

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {"dynamic.raw_weights": self.raw_weights}
        params.update(self.head.named_parameters("head"))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def predict(self, states: LayerStates) -> Tensor:
        return predict_dynamic(states, self)

    def loss(self, states: LayerStates, targets: np.ndarray) -> Tensor:
        return ad.mse_loss(self.predict(states), targets)


class MultiHead:
    """Independent heads at distinct layers; loss is their weighted MSE sum."""

    def __init__(self, heads: Sequence[RegressionHead], loss_weights: Optional[Sequence[float]] = None):
        heads = list(heads)
        if len(heads) < 2:
            raise ConfigError("multi-head regression needs at least two heads")
        layers = [h.layer for h in heads]
        if len(set(layers)) != len(layers):
            raise ConfigError(f"multi-head layers must be distinct, got {layers}")
        weights = np.full(len(heads), 1.0 / len(heads)) if loss_weights is None else np.asarray(loss_weights, float)
        if weights.shape != (len(heads),):
            raise ConfigError(f"{weights.size} loss weight(s) given for {len(heads)} head(s)")
        if (weights <= 0).any():
            raise ConfigError(f"loss weights must be positive, got {weights.tolist()}")
        self.heads = heads
        self.loss_weights = weights / weights.sum()

    @property
    def layers(self) -> Tuple[int, ...]:
        return tuple(h.layer for h in self.heads)

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, head in enumerate(self.heads):
            params.update(head.named_parameters(f"heads.{i}"))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def predict(self, states: LayerStates) -> Tensor:
        return multihead_predict(states, self)

    def loss(self, states: LayerStates, targets: np.ndarray) -> Tensor:
        return multihead_loss(states, self, targets)


Head = Union[RegressionHead, DynamicWeighting, MultiHead]


def predict_vanilla(states: LayerStates, head: RegressionHead) -> Tensor:
    """``y = h_k W_n`` for every row of the batch, shape ``[B]``."""
    return _project(states.final_token_states(head.layer), head.weight, head.bias)


def combined_state(states: LayerStates, dw: DynamicWeighting) -> Tensor:
    """``sum_k softmax(w)_k h_k``, shape ``[B, d]``."""
    resolved = [resolve_layer(x, states.n_layers) for x in dw.layers]
    if len(set(resolved)) != len(resolved):
        raise ConfigError(f"dynamic layers {list(dw.layers)} resolve to duplicates {resolved}")
    alpha = ad.softmax(dw.raw_weights)
    combined: Optional[Tensor] = None
    for k, layer in enumerate(dw.layers):
        term = ad.mul(alpha[k], states.final_token_states(layer))
        combined = term if combined is None else combined + term
    assert combined is not None
    return combined


def predict_dynamic(states: LayerStates, dw: DynamicWeighting) -> Tensor:
    return _project(combined_state(states, dw), dw.head.weight, dw.head.bias)


def multihead_outputs(states: LayerStates, mh: MultiHead) -> List[Tensor]:
    return [predict_vanilla(states, head) for head in mh.heads]


def multihead_loss(states: LayerStates, mh: MultiHead, targets: np.ndarray) -> Tensor:
    """``sum_h loss_weights[h] * MSE(y_h, targets)``."""
    if len(mh.loss_weights) != len(mh.heads):
        raise ConfigError(f"{len(mh.loss_weights)} loss weight(s) for {len(mh.heads)} head(s)")
    total: Optional[Tensor] = None
    for weight, prediction in zip(mh.loss_weights, multihead_outputs(states, mh)):
        term = ad.scale(ad.mse_loss(prediction, targets), float(weight))
        total = term if total is None else total + term
    assert total is not None
    return total


def multihead_predict(states: LayerStates, mh: MultiHead) -> Tensor:
    """Arithmetic mean of the heads' outputs, whatever the loss weights."""
    outputs = multihead_outputs(states, mh)
    total = outputs[0]
    for out in outputs[1:]:
        total = total + out
    return total / len(outputs)


def build_head(strategy: HeadStrategy, d_model: int, *, seed: int = 0, dtype: str = "float32") -> Head:
    rng = np.random.default_rng(seed)
    if strategy.kind is StrategyKind.VANILLA:
        return RegressionHead.initialise(strategy.layers[0], d_model, rng, bias=strategy.bias, dtype=dtype)
    if strategy.kind is StrategyKind.DYNAMIC:
        # the shared head's layer field is unused
        head = RegressionHead.initialise(strategy.layers[0], d_model, rng, bias=strategy.bias, dtype=dtype)
        return DynamicWeighting(strategy.layers, head)
    heads = [RegressionHead.initialise(x, d_model, rng, bias=strategy.bias, dtype=dtype) for x in strategy.layers]
    return MultiHead(heads, strategy.loss_weights)


def head_parameter_count(head: Head) -> int:
    return int(np.sum([p.size for p in head.parameters()]))


def save_head(path: Path, head: Head, strategy: HeadStrategy) -> Path:
    """Write head tensors to ``path`` and the strategy to a ``.json`` sidecar."""
    path = Path(path)
    tensors = {name: p.data for name, p in head.named_parameters().items()}
    written = save_tensors(path, tensors, {"kind": "head", "strategy": strategy.to_dict()})
    atomic_write_json(path.with_suffix(".json"), strategy.to_dict())
    return written


def load_head(path: Path) -> Tuple[HeadStrategy, Head]:
    meta, tensors = load_tensors(path)
    expect_kind(meta, "head", path)
    strategy = HeadStrategy.from_dict(meta["strategy"])
    sidecar = Path(path).with_suffix(".json")
    if sidecar.exists() and json.loads(sidecar.read_text(encoding="utf-8")) != strategy.to_dict():
        _logger.warning("Head sidecar %s disagrees with the checkpoint; using the checkpoint", sidecar)
    try:
        first = tensors["head.weight"] if "head.weight" in tensors else tensors["heads.0.weight"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: head checkpoint holds no weights") from exc
    head = build_head(strategy, first.shape[0])
    params = head.named_parameters()
    if set(params) != set(tensors):
        raise CheckpointError(f"{path}: head tensors {sorted(tensors)} do not match strategy {strategy.label}")
    for name, p in params.items():
        p.data = tensors[name].astype(p.dtype, copy=True)
    return strategy, head
