"""Training loop, prediction and layer/strategy sweeps.

A :class:`FeatureSource` hands the loop :class:`~layerqe.transformer.LayerStates`
for a batch of row indices, either by running the backbone
(:class:`BackboneFeatures`) or by slicing an embedding dump
(:class:`DumpFeatures`). The loop itself does not care which.
"""

from __future__ import annotations

import contextvars
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from layerqe import autodiff as ad
from layerqe import lora
from layerqe.artifacts import atomic_write_json
from layerqe.data import DumpStates, EmbeddingDump, EncodedDataset, NormalizationMode, ScoreScaler
from layerqe.errors import ConfigError, LayerQEError, TrainingDivergedError, UndefinedCorrelationError
from layerqe.heads import Head, HeadStrategy, StrategyKind, build_head, head_parameter_count
from layerqe.lora import LoraAdapter, LoraConfig
from layerqe.optim import Optimizer, OptimizerKind, clip_grad_norm
from layerqe.stats import spearman
from layerqe.transformer import LayerStates, TransformerModel, resolve_layer

_logger = logging.getLogger(__name__)

StepCallback = Callable[[int, float], None]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``epochs = 0`` is allowed and yields an untrained head. ``heads_only`` keeps
    the adapters fixed (they still shape the features).
    """

    strategy: HeadStrategy = field(default_factory=lambda: HeadStrategy.vanilla(-1))
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    eval_every: int = 0
    frozen_backbone: bool = False
    use_lora: bool = True
    heads_only: bool = False
    lora: LoraConfig = field(default_factory=LoraConfig)
    normalization: NormalizationMode = NormalizationMode.MINMAX

    def __post_init__(self) -> None:
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        object.__setattr__(self, "normalization", NormalizationMode(self.normalization))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")

    @property
    def trains_adapters(self) -> bool:
        return self.use_lora and not self.frozen_backbone and not self.heads_only

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "optimizer": self.optimizer.value,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
            "eval_every": self.eval_every,
            "frozen_backbone": self.frozen_backbone,
            "use_lora": self.use_lora,
            "heads_only": self.heads_only,
            "lora": self.lora.to_dict(),
            "normalization": self.normalization.value,
        }


@dataclass
class TrainReport:
    strategy: str
    loss_curve: List[float] = field(default_factory=list)
    validation: List[Dict[str, Any]] = field(default_factory=list)
    checkpoint: Optional[str] = None
    trainable_parameters: int = 0
    head_parameters: int = 0
    adapter_parameters: int = 0
    steps: int = 0
    seed: int = 0
    scaler: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_curve[-1] if self.loss_curve else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "loss_curve": self.loss_curve,
            "validation": self.validation,
            "checkpoint": self.checkpoint,
            "trainable_parameters": self.trainable_parameters,
            "head_parameters": self.head_parameters,
            "adapter_parameters": self.adapter_parameters,
            "steps": self.steps,
            "seed": self.seed,
            "scaler": self.scaler,
        }

    def write(self, path: Path) -> Path:
        return atomic_write_json(Path(path), self.to_dict())


# -- feature sources ---------------------------------------------------------------


class FeatureSource(Protocol):
    n_layers: int
    d_model: int
    targets: np.ndarray
    pair_ids: Tuple[str, ...]

    def __len__(self) -> int: ...

    def states(self, indices: np.ndarray) -> LayerStates: ...

    def fork(self, model: Optional[TransformerModel]) -> "FeatureSource": ...


class BackboneFeatures:
    """Runs ``model`` over rows of an encoded dataset."""

    def __init__(self, model: TransformerModel, dataset: EncodedDataset, *, frozen: bool = False):
        if dataset.token_ids.shape[1] > model.config.max_seq_len:
            raise ConfigError(
                f"prompts are up to {dataset.token_ids.shape[1]} tokens "
                f"but the model accepts {model.config.max_seq_len}"
            )
        self.model = model
        self.dataset = dataset
        self.frozen = frozen
        self.n_layers = model.config.n_layers
        self.d_model = model.config.d_model
        self.targets = dataset.targets
        self.pair_ids = dataset.pair_ids

    def __len__(self) -> int:
        return len(self.dataset)

    def states(self, indices: np.ndarray) -> LayerStates:
        ids, mask = self.dataset.batch(indices)
        if self.frozen:
            with ad.no_grad():
                return self.model.forward(ids, mask)
        return self.model.forward(ids, mask)

    def fork(self, model: Optional[TransformerModel]) -> "BackboneFeatures":
        return BackboneFeatures(model or self.model, self.dataset, frozen=self.frozen)


class DumpFeatures:
    """Frozen-path features read from an :class:`~layerqe.data.EmbeddingDump`."""

    def __init__(self, dump: EmbeddingDump, scaler: Optional[ScoreScaler] = None, *, dtype: str = "float32"):
        self.dump = dump
        self.dtype = dtype
        self.n_layers = dump.n_layers
        self.d_model = dump.hidden
        self.targets = scaler.transform(dump.targets) if scaler is not None else dump.targets.copy()
        self.pair_ids = dump.pair_ids

    def __len__(self) -> int:
        return self.dump.n_samples

    def states(self, indices: np.ndarray) -> LayerStates:
        return DumpStates(self.dump, indices, self.dtype)

    def fork(self, model: Optional[TransformerModel]) -> "DumpFeatures":
        return self


# -- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    head: Head
    adapters: Dict[str, LoraAdapter]
    report: TrainReport


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def predict(features: FeatureSource, head: Head, *, batch_size: int = 64) -> np.ndarray:
    """Head outputs for every row, in row order (normalised target space)."""
    out: List[np.ndarray] = []
    with ad.no_grad():
        for start in range(0, len(features), batch_size):
            idx = np.arange(start, min(start + batch_size, len(features)))
            out.append(head.predict(features.states(idx)).numpy().astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def _safe_spearman(preds: np.ndarray, refs: np.ndarray) -> Optional[float]:
    try:
        return spearman(preds, refs)
    except UndefinedCorrelationError:
        return None


def train(
    features: FeatureSource,
    cfg: TrainConfig,
    *,
    adapters: Optional[Dict[str, LoraAdapter]] = None,
    validation: Optional[FeatureSource] = None,
    on_step: Optional[StepCallback] = None,
) -> TrainResult:
    """Fit ``cfg.strategy`` on ``features``.

    With a live backbone and ``cfg.use_lora``, adapters are injected unless
    ``adapters`` is given. Only adapter and head parameters change; the base
    weights are hashed before and after to prove it.

    Raises
    ------
    TrainingDivergedError
        If the loss becomes NaN or infinite.
    """
    if len(features) == 0:
        raise ConfigError("cannot train on an empty dataset")
    cfg.strategy.resolve(features.n_layers)

    model = features.model if isinstance(features, BackboneFeatures) else None
    if model is not None and cfg.use_lora and not cfg.frozen_backbone and adapters is None:
        adapters = lora.inject(model, cfg.lora, seed=cfg.seed + 1)
    adapters = adapters or {}
    digest_before = model.digest() if model is not None else None

    dtype = model.config.dtype if model is not None else getattr(features, "dtype", "float32")
    head = build_head(cfg.strategy, features.d_model, seed=cfg.seed, dtype=dtype)
    params = head.parameters()
    adapter_count = 0
    if cfg.trains_adapters and adapters:
        params = params + lora.adapter_parameters(adapters)
        adapter_count = lora.adapter_parameter_count(adapters)
    else:
        for p in lora.adapter_parameters(adapters):
            p.requires_grad = False
    report = TrainReport(
        strategy=cfg.strategy.label,
        trainable_parameters=head_parameter_count(head) + adapter_count,
        head_parameters=head_parameter_count(head),
        adapter_parameters=adapter_count,
        seed=cfg.seed,
    )
    optimizer = Optimizer(params, cfg.optimizer, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    _logger.info(
        "Training %s: %d sample(s), %d epoch(s), %d trainable parameter(s)",
        cfg.strategy.label,
        len(features),
        cfg.epochs,
        report.trainable_parameters,
    )

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses: List[float] = []
        for idx in _batches(len(features), cfg.batch_size, rng):
            optimizer.zero_grad()
            loss = head.loss(features.states(idx), features.targets[idx])
            ad.backward(loss)
            value = loss.item()
            if cfg.grad_clip is not None:
                norm = clip_grad_norm(params, cfg.grad_clip)
            else:
                norm = ad.global_grad_norm(params)
            step += 1
            if not (math.isfinite(value) and math.isfinite(norm)):
                raise TrainingDivergedError(step, cfg.learning_rate, norm, value)
            optimizer.step()
            report.loss_curve.append(value)
            epoch_losses.append(value)
            _logger.debug("step %d loss %.6g grad-norm %.4g", step, value, norm)
            if on_step is not None:
                on_step(step, value)
            if validation is not None and cfg.eval_every and step % cfg.eval_every == 0:
                rho = _safe_spearman(predict(validation, head), validation.targets)
                _logger.info("step %d validation spearman %s", step, "NA" if rho is None else f"{rho:.4f}")
        entry: Dict[str, Any] = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if validation is not None:
            entry["spearman"] = _safe_spearman(predict(validation, head), validation.targets)
        report.validation.append(entry)
        _logger.info("epoch %d/%d: %s", epoch, cfg.epochs, entry)

    report.steps = step
    if model is not None and model.digest() != digest_before:
        raise LayerQEError("base weights changed during training")
    return TrainResult(head, adapters, report)


# -- sweeps --------------------------------------------------------------------------------


@dataclass
class RunOutcome:
    """One sweep run: per-pair test Spearman plus raw predictions, or the error that stopped it."""

    strategy: HeadStrategy
    per_pair: Dict[str, Optional[float]] = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None
    report: Optional[TrainReport] = None
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return self.strategy.label

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    runs: List[RunOutcome]
    pairs: Tuple[str, ...]
    references: np.ndarray
    pair_ids: Tuple[str, ...]

    def best(self, pair: str) -> Optional[RunOutcome]:
        """Highest-scoring run for ``pair``; ties go to the earliest run.

        :func:`layer_sweep` orders runs from the last layer backwards, so on a
        tie the layer closest to -1 wins.
        """
        best: Optional[RunOutcome] = None
        for run in self.runs:
            value = run.per_pair.get(pair)
            if value is None:
                continue
            if best is None or value > best.per_pair[pair]:
                best = run
        return best


def per_pair_spearman(
    predictions: np.ndarray, references: np.ndarray, pair_ids: Sequence[str]
) -> Dict[str, Optional[float]]:
    ids = np.asarray(pair_ids)
    return {
        pair: _safe_spearman(predictions[ids == pair], references[ids == pair]) for pair in dict.fromkeys(pair_ids)
    }


def _run_one(train_set: FeatureSource, test_set: FeatureSource, cfg: TrainConfig) -> RunOutcome:
    outcome = RunOutcome(cfg.strategy)
    try:
        base = train_set.model.clone() if isinstance(train_set, BackboneFeatures) else None
        run_train, run_test = train_set.fork(base), test_set.fork(base)
        result = train(run_train, cfg)
        outcome.report = result.report
        outcome.predictions = predict(run_test, result.head)
        outcome.per_pair = per_pair_spearman(outcome.predictions, run_test.targets, run_test.pair_ids)
        rounded = {k: None if v is None else round(v, 4) for k, v in outcome.per_pair.items()}
        _logger.info("%s: %s", cfg.strategy.label, rounded)
    except LayerQEError as exc:
        outcome.error = str(exc)
        _logger.warning("%s failed: %s", cfg.strategy.label, exc)
    return outcome


def strategy_sweep(
    train_set: FeatureSource,
    test_set: FeatureSource,
    strategies: Sequence[HeadStrategy],
    cfg: TrainConfig,
    *,
    workers: int = 1,
) -> SweepResult:
    """Train every strategy independently from the same base and score it on ``test_set``.

    Runs never share state: each gets a fresh clone of the base model, fresh
    adapters and a fresh head. A failing run is recorded and the sweep goes on.
    """
    if not strategies:
        raise ConfigError("a sweep needs at least one strategy")
    configs = [replace(cfg, strategy=s) for s in strategies]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(contextvars.copy_context().run, _run_one, train_set, test_set, c) for c in configs]
            runs = [f.result() for f in futures]
    else:
        runs = [_run_one(train_set, test_set, c) for c in configs]
    pairs = tuple(dict.fromkeys(test_set.pair_ids))
    return SweepResult(runs, pairs, np.asarray(test_set.targets, dtype=np.float64), tuple(test_set.pair_ids))


def sweep_order(layers: Sequence[int], n_layers: int) -> List[int]:
    """Layers from the last one backwards; unresolvable indices keep their place at the end."""

    def key(layer: int) -> Tuple[int, int]:
        try:
            return (0, -resolve_layer(layer, n_layers))
        except LayerQEError:
            return (1, 0)

    return sorted(dict.fromkeys(int(x) for x in layers), key=key)


def layer_sweep(
    train_set: FeatureSource,
    test_set: FeatureSource,
    layers: Sequence[int],
    cfg: TrainConfig,
    *,
    workers: int = 1,
) -> SweepResult:
    """One vanilla run per layer; see :func:`strategy_sweep`."""
    if not layers:
        raise ConfigError("a layer sweep needs at least one layer")
    ordered = sweep_order(layers, train_set.n_layers)
    strategies = [HeadStrategy.vanilla(x, bias=cfg.strategy.bias) for x in ordered]
    return strategy_sweep(train_set, test_set, strategies, cfg, workers=workers)


def group_strategies(kind: StrategyKind, groups: Sequence[Sequence[int]], *, bias: bool = False) -> List[HeadStrategy]:
    return [HeadStrategy(kind, tuple(g), bias=bias) for g in groups]


def fit_scaler(targets: Sequence[float], cfg: TrainConfig, score_range: Sequence[float]) -> ScoreScaler:
    return ScoreScaler.fit(targets, cfg.normalization, score_range)


def summarise(result: SweepResult) -> Mapping[str, Optional[str]]:
    """Best run label per pair."""
    return {pair: (run.label if (run := result.best(pair)) else None) for pair in result.pairs}
