"""Low-rank adaptation of frozen projection matrices.

An adapted projection computes ``x W^T + scale * x A^T B^T``, i.e. it uses
``W' = W + scale * B A`` without ever writing to ``W``. ``A`` starts as a small
normal draw and ``B`` at zero, so a freshly adapted model computes exactly the
base model's function.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np

from layerqe import autodiff as ad
from layerqe.autodiff import Tensor
from layerqe.checkpoint import expect_kind, load_tensors, save_tensors
from layerqe.errors import CheckpointError, ConfigError, ShapeError
from layerqe.transformer import ATTENTION_PROJECTIONS, PROJECTIONS, Linear, TransformerConfig, TransformerModel

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    scale: float = 1.0
    targets: Tuple[str, ...] = ATTENTION_PROJECTIONS
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        targets = tuple(self.targets)
        object.__setattr__(self, "targets", targets)
        if not targets:
            raise ConfigError("LoRA needs at least one target projection")
        unknown = [t for t in targets if t not in PROJECTIONS]
        if unknown:
            raise ConfigError(f"unknown LoRA target(s) {unknown}; valid names are {list(PROJECTIONS)}")
        if len(set(targets)) != len(targets):
            raise ConfigError(f"duplicate LoRA targets in {list(targets)}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["targets"] = list(self.targets)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LoraConfig":
        return cls(
            rank=int(data["rank"]),
            scale=float(data["scale"]),
            targets=tuple(data["targets"]),
            init_std=float(data.get("init_std", 0.02)),
        )


class LoraAdapter:
    """Trainable pair ``A`` [r, d_in], ``B`` [d_out, r] attached to one projection."""

    def __init__(self, target: str, d_in: int, d_out: int, rank: int, scale: float, A: np.ndarray, B: np.ndarray):
        if A.shape != (rank, d_in) or B.shape != (d_out, rank):
            raise ShapeError(f"{target}: adapter shapes A{A.shape} B{B.shape} do not fit rank {rank}, {d_out}x{d_in}")
        self.target = target
        self.rank = rank
        self.scale = float(scale)
        self.A = Tensor(A, requires_grad=True, name=f"{target}.lora_A")
        self.B = Tensor(B, requires_grad=True, name=f"{target}.lora_B")

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]

    def branch(self, x: Tensor) -> Tensor:
        low = ad.matmul(x, ad.transpose(self.A))
        return ad.scale(ad.matmul(low, ad.transpose(self.B)), self.scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


def inject(model: TransformerModel, cfg: LoraConfig, *, seed: int = 0) -> Dict[str, LoraAdapter]:
    """Attach a fresh adapter to every targeted projection of every layer.

    The base weights are frozen. Returns the adapters keyed by projection name
    (``layers.{i}.{projection}``).
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(model.config.dtype)
    model.set_trainable(False)
    adapters: Dict[str, LoraAdapter] = {}
    for name, linear in model.linears().items():
        if name.rsplit(".", 1)[1] not in cfg.targets:
            continue
        if cfg.rank > min(linear.d_in, linear.d_out):
            raise ConfigError(
                f"LoRA rank {cfg.rank} exceeds min(d_in, d_out) = {min(linear.d_in, linear.d_out)} for {name}"
            )
        A = rng.normal(0.0, cfg.init_std, size=(cfg.rank, linear.d_in)).astype(dtype)
        B = np.zeros((linear.d_out, cfg.rank), dtype=dtype)
        adapter = LoraAdapter(name, linear.d_in, linear.d_out, cfg.rank, cfg.scale, A, B)
        linear.adapter = adapter
        adapters[name] = adapter
    _logger.info(
        "Injected %d LoRA adapter(s), rank %d, %d trainable parameters",
        len(adapters),
        cfg.rank,
        adapter_parameter_count(adapters),
    )
    return adapters


def remove(model: TransformerModel) -> None:
    for linear in model.linears().values():
        linear.adapter = None


def adapter_parameter_count(adapters: Mapping[str, LoraAdapter]) -> int:
    return sum(a.parameter_count for a in adapters.values())


def expected_parameter_count(model_config: TransformerConfig, cfg: LoraConfig) -> int:
    """Closed form ``sum r * (d_in + d_out)`` over targeted projections."""
    d, ff = model_config.d_model, model_config.d_ff
    dims = {name: (d, d) for name in ATTENTION_PROJECTIONS}
    dims.update({"gate_proj": (d, ff), "up_proj": (d, ff), "down_proj": (ff, d)})
    per_layer = sum(cfg.rank * (dims[t][0] + dims[t][1]) for t in cfg.targets)
    return per_layer * model_config.n_layers


def merge(adapter: LoraAdapter, weight: np.ndarray) -> np.ndarray:
    """Return the dense merged weight ``W + scale * B A``."""
    weight = np.asarray(weight)
    if weight.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(
            f"{adapter.target}: weight shape {weight.shape} does not match adapter {adapter.d_out}x{adapter.d_in}"
        )
    return weight + adapter.delta().astype(weight.dtype)


def merged_model(model: TransformerModel) -> TransformerModel:
    """A plain model whose projections hold the merged weights of ``model``'s adapters."""
    twin = model.clone()
    for name, linear in model.linears().items():
        if linear.adapter is not None:
            twin.linears()[name].weight.data = merge(linear.adapter, linear.weight.data)
    return twin


def adapter_parameters(adapters: Mapping[str, LoraAdapter]) -> List[Tensor]:
    return [p for adapter in adapters.values() for p in adapter.parameters()]


def save_adapters(path: Path, adapters: Mapping[str, LoraAdapter], cfg: LoraConfig) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    for name, adapter in adapters.items():
        tensors[f"{name}.lora_A"] = adapter.A.data
        tensors[f"{name}.lora_B"] = adapter.B.data
    return save_tensors(path, tensors, {"kind": "lora", "lora": cfg.to_dict(), "targets": sorted(adapters)})


def load_adapters(path: Path, model: TransformerModel) -> Tuple[LoraConfig, Dict[str, LoraAdapter]]:
    """Load adapters from ``path`` and attach them to ``model`` (a fresh base works)."""
    meta, tensors = load_tensors(path)
    expect_kind(meta, "lora", path)
    cfg = LoraConfig.from_dict(meta["lora"])
    linears = model.linears()
    dtype = np.dtype(model.config.dtype)
    adapters: Dict[str, LoraAdapter] = {}
    model.set_trainable(False)
    for name in meta["targets"]:
        if name not in linears:
            raise CheckpointError(f"{path}: adapter target {name} does not exist in the model")
        linear: Linear = linears[name]
        try:
            A = tensors[f"{name}.lora_A"].astype(dtype)
            B = tensors[f"{name}.lora_B"].astype(dtype)
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing tensor {exc}") from exc
        adapter = LoraAdapter(name, linear.d_in, linear.d_out, cfg.rank, cfg.scale, A, B)
        linear.adapter = adapter
        adapters[name] = adapter
    return cfg, adapters
