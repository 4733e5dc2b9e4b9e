"""Miniature decoder-only transformer that exposes every layer's hidden states.

Blocks are pre-norm (RMS), with causal multi-head self-attention, learned
absolute positions and a gated feed-forward network. There is no language-model
head and no final normalisation: the backbone only embeds, and ``H_k`` is the
output of block ``k`` after both residual additions.

Layers are addressed with signed indices, negative values counting back from
the last layer (``-1`` is the final block).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from layerqe import autodiff as ad
from layerqe.autodiff import Tensor
from layerqe.checkpoint import expect_kind, load_tensors, save_tensors
from layerqe.errors import CheckpointError, ConfigError, InputError, LayerIndexError

_logger = logging.getLogger(__name__)

ATTENTION_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj")
FEED_FORWARD_PROJECTIONS = ("gate_proj", "up_proj", "down_proj")
PROJECTIONS = ATTENTION_PROJECTIONS + FEED_FORWARD_PROJECTIONS


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 172
    vocab_size: int = 512
    max_seq_len: int = 256
    activation: str = "silu"
    init_std: float = 0.02
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ad.ACTIVATIONS)}, got {self.activation!r}")
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if np.dtype(self.dtype).kind != "f":
            raise ConfigError(f"dtype must be a floating type, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TransformerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown transformer config keys: {sorted(unknown)}")
        return cls(**dict(data))


def resolve_layer(index: int, n_layers: int) -> int:
    """Map a signed layer index onto ``[0, n_layers - 1]``.

    >>> resolve_layer(-1, 28)
    27
    >>> resolve_layer(-7, 8)
    1
    """
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    resolved = n_layers + index if index < 0 else index
    if not 0 <= resolved < n_layers:
        raise LayerIndexError(index, n_layers)
    return resolved


class LayerStates(Protocol):
    """Anything a regression head can read final-token states from."""

    @property
    def n_layers(self) -> int: ...

    def final_token_states(self, layer: int) -> Tensor: ...


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer hidden states of one forward pass.

    ``hidden_states[k]`` is ``H_k`` for the whole batch, shape ``[B, T, d]``;
    ``final_token_index[b]`` is the last non-padding position of row ``b``.
    """

    hidden_states: Tuple[Tensor, ...]
    final_token_index: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.hidden_states)

    @property
    def batch_size(self) -> int:
        return int(self.final_token_index.shape[0])

    def layer(self, index: int) -> Tensor:
        return self.hidden_states[resolve_layer(index, self.n_layers)]

    def final_token_states(self, layer: int) -> Tensor:
        """``h_k`` for every row: the layer's hidden state at the final token, ``[B, d]``."""
        return ad.select_positions(self.layer(layer), self.final_token_index)


def final_token_state(trace: ForwardTrace, layer: int, row: int = 0) -> Tensor:
    """``h_k = H_k[-1]`` for one sequence of the batch, shape ``[d]``."""
    return trace.final_token_states(layer)[row]


class Linear:
    """``y = x W^T``, with an optional low-rank branch added by :mod:`layerqe.lora`."""

    def __init__(self, name: str, weight: Tensor):
        self.name = name
        self.weight = weight
        self.adapter: Optional[Any] = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.adapter is not None:
            y = y + self.adapter.branch(x)
        return y


@dataclass
class DecoderBlock:
    index: int
    config: TransformerConfig
    attn_norm: Tensor
    ffn_norm: Tensor
    projections: Dict[str, Linear] = field(default_factory=dict)

    def __call__(self, x: Tensor, attn_mask: np.ndarray) -> Tensor:
        x = x + self._attention(ad.rms_norm(x, self.attn_norm, self.config.norm_eps), attn_mask)
        return x + self._feed_forward(ad.rms_norm(x, self.ffn_norm, self.config.norm_eps))

    def _attention(self, h: Tensor, attn_mask: np.ndarray) -> Tensor:
        batch, seq, _ = h.shape
        n_heads, head_dim = self.config.n_heads, self.config.head_dim

        def split_heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (batch, seq, n_heads, head_dim)), (0, 2, 1, 3))

        q = split_heads(self.projections["q_proj"](h))
        k = split_heads(self.projections["k_proj"](h))
        v = split_heads(self.projections["v_proj"](h))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(head_dim))
        probs = ad.softmax(scores, axis=-1, mask=attn_mask)
        context = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
        return self.projections["o_proj"](ad.reshape(context, (batch, seq, self.config.d_model)))

    def _feed_forward(self, h: Tensor) -> Tensor:
        act = ad.ACTIVATIONS[self.config.activation]
        gated = act(self.projections["gate_proj"](h)) * self.projections["up_proj"](h)
        return self.projections["down_proj"](gated)

    def named_parameters(self) -> Dict[str, Tensor]:
        prefix = f"layers.{self.index}"
        params = {f"{prefix}.attn_norm": self.attn_norm, f"{prefix}.ffn_norm": self.ffn_norm}
        for name in PROJECTIONS:
            params[f"{prefix}.{name}"] = self.projections[name].weight
        return params


class TransformerModel:
    """Decoder-only backbone; :meth:`forward` returns a :class:`ForwardTrace`.

    Base parameters are created frozen (``requires_grad=False``); pass
    ``trainable=True`` to train or gradient-check the base itself.
    """

    def __init__(self, config: TransformerConfig, *, seed: int = 0, trainable: bool = False):
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        d, std = config.d_model, config.init_std

        def normal(name: str, *shape: int) -> Tensor:
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=trainable, name=name)

        def ones(name: str) -> Tensor:
            return Tensor(np.ones(d, dtype=dtype), requires_grad=trainable, name=name)

        self.embed_tokens = normal("embed_tokens", config.vocab_size, d)
        self.embed_positions = normal("embed_positions", config.max_seq_len, d)
        shapes = {
            "q_proj": (d, d),
            "k_proj": (d, d),
            "v_proj": (d, d),
            "o_proj": (d, d),
            "gate_proj": (config.d_ff, d),
            "up_proj": (config.d_ff, d),
            "down_proj": (d, config.d_ff),
        }
        self.layers: List[DecoderBlock] = []
        for i in range(config.n_layers):
            block = DecoderBlock(i, config, ones(f"layers.{i}.attn_norm"), ones(f"layers.{i}.ffn_norm"))
            for name in PROJECTIONS:
                full = f"layers.{i}.{name}"
                block.projections[name] = Linear(full, normal(full, *shapes[name]))
            self.layers.append(block)
        _logger.debug("Initialised transformer %s with seed %d", config, seed)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {"embed_tokens": self.embed_tokens, "embed_positions": self.embed_positions}
        for block in self.layers:
            params.update(block.named_parameters())
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def linears(self) -> Dict[str, Linear]:
        """Every projection, keyed ``layers.{i}.{projection}``."""
        return {lin.name: lin for block in self.layers for lin in block.projections.values()}

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable
            p.grad = np.zeros_like(p.data) if trainable else None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def digest(self) -> str:
        """SHA-256 over every base parameter's name and bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"parameter names do not match: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} differs from model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def clone(self) -> "TransformerModel":
        """Fresh copy of the base weights (no adapters, frozen)."""
        twin = TransformerModel(self.config)
        twin.load_state_dict(self.state_dict())
        return twin

    # -- forward --------------------------------------------------------------

    def forward(
        self, token_ids: Sequence[Sequence[int]] | np.ndarray, pad_mask: Optional[np.ndarray] = None
    ) -> ForwardTrace:
        """Run the backbone and keep every layer's hidden states.

        Parameters
        ----------
        token_ids : array-like of int, shape [B, T] or [T]
            Right-padded token ids.
        pad_mask : array-like of bool or None
            True for real tokens. Every row must be a run of True followed by
            padding. Defaults to all-True.
        """
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
            pad_mask = None if pad_mask is None else np.asarray(pad_mask)[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError(f"token_ids must be a non-empty [B, T] array, got shape {ids.shape}")
        batch, seq = ids.shape
        if seq > self.config.max_seq_len:
            raise InputError(f"sequence length {seq} exceeds max_seq_len {self.config.max_seq_len}")
        mask = np.ones((batch, seq), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        if mask.shape != ids.shape:
            raise InputError(f"pad_mask shape {mask.shape} differs from token_ids shape {ids.shape}")
        lengths = mask.sum(axis=1)
        if (lengths == 0).any():
            raise InputError("every sequence needs at least one non-padding token")
        if not (mask == (np.arange(seq)[None, :] < lengths[:, None])).all():
            raise InputError("padding must be on the right")
        if ids.dtype.kind not in "iu":
            raise InputError(f"token ids must be integers, got {ids.dtype}")
        real = ids[mask]
        if real.size and (real.min() < 0 or real.max() >= self.config.vocab_size):
            raise InputError(f"token id out of range for vocab_size {self.config.vocab_size}")

        ids = np.where(mask, ids, 0)
        positions = np.broadcast_to(np.arange(seq), (batch, seq))
        x = ad.embedding(self.embed_tokens, ids) + ad.embedding(self.embed_positions, positions)
        causal = np.tril(np.ones((seq, seq), dtype=bool))
        attn_mask = causal[None, None, :, :] & mask[:, None, None, :]

        hidden: List[Tensor] = []
        for block in self.layers:
            x = block(x, attn_mask)
            hidden.append(x)
        return ForwardTrace(tuple(hidden), (lengths - 1).astype(np.int64))

    __call__ = forward

    # -- persistence ------------------------------------------------------------

    def save(self, path: Path) -> Path:
        return save_tensors(path, self.state_dict(), {"kind": "transformer", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path: Path) -> "TransformerModel":
        meta, tensors = load_tensors(path)
        expect_kind(meta, "transformer", path)
        try:
            config = TransformerConfig.from_dict(meta["config"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: transformer checkpoint has no {exc} entry") from exc
        except (TypeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: invalid transformer config: {exc}") from exc
        model = cls(config)
        model.load_state_dict(tensors)
        _logger.info("Loaded transformer from %s", path)
        return model
