"""layerqe API: the orchestration behind every CLI command.

Each ``*_api`` function loads its inputs, runs the library code and writes its
artifacts (plus ``manifest.json``) into an output directory. The CLI only
parses options and maps errors onto exit codes.
"""

from __future__ import annotations

import logging
import sys
import tomllib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from layerqe import autodiff as ad
from layerqe import lora
from layerqe.artifacts import RunManifest, Stopwatch
from layerqe.data import (
    DA_SCORE_RANGE,
    EmbeddingDump,
    EncodedDataset,
    NormalizationMode,
    PromptTemplate,
    Sample,
    ScoreScaler,
    encode_samples,
    is_dump,
    load_tsv,
    pair_counts,
    read_dump,
    write_dump,
    write_tsv,
)
from layerqe.errors import ConfigError, DataFormatError
from layerqe.heads import DEFAULT_LAYER_GROUPS, HeadStrategy, StrategyKind, save_head
from layerqe.report import (
    COMPARE_COLUMNS,
    METRIC_COLUMNS,
    Report,
    compare_table,
    metrics_table,
    read_predictions,
    report_from_sweep,
    write_predictions,
    write_table,
)
from layerqe.synth import (
    TEST_PER_TRAIN,
    generate_intensity_samples,
    generate_qe_samples,
    planted_dump,
    split_dump,
    split_train_test,
)
from layerqe.tokenizer import ByteTokenizer
from layerqe.train import (
    BackboneFeatures,
    DumpFeatures,
    FeatureSource,
    TrainConfig,
    TrainReport,
    group_strategies,
    layer_sweep,
    predict,
    strategy_sweep,
    train,
)
from layerqe.transformer import TransformerConfig, TransformerModel, resolve_layer

_logger = logging.getLogger(__name__)

CONFIG_ENVVAR = "LAYERQE_CONFIG"
HEAD_FILE = "head.lqck"
LORA_FILE = "lora.lqck"
BASE_FILE = "base.lqck"
TOKENIZER_FILE = "tokenizer.json"
TRAIN_REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.tsv"
DUMP_FILE = "embeddings.alpe"
SWEEP_STEM = "sweep"
METRICS_STEM = "metrics"
COMPARE_STEM = "compare"


class SynthKind(Enum):
    QE = "qe"
    INTENSITY = "intensity"
    DUMP = "dump"
    MODEL = "model"


def setup_logging(loglevel: Optional[int]) -> None:
    """Setup basic logging."""
    if loglevel is None:
        loglevel = logging.WARNING
    logformat = "[%(asctime)s] %(levelname)s:%(name)s:%(message)s"
    logging.basicConfig(level=loglevel, stream=sys.stdout, format=logformat, datefmt="%Y-%m-%d %H:%M:%S")


# -- option parsing -------------------------------------------------------------------


def load_config(path: Path, commands: Iterable[str]) -> Dict[str, Dict[str, Any]]:
    """Read a TOML config into a click ``default_map``.

    Top-level keys apply to every command; a ``[command]`` table overrides them
    for that command. Hyphens in keys become underscores.
    """
    path = Path(path)
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    commands = list(commands)
    unknown = [k for k, v in data.items() if isinstance(v, dict) and k not in commands]
    if unknown:
        raise ConfigError(f"{path}: unknown command table(s) {unknown}; expected one of {commands}")
    common = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    default_map: Dict[str, Dict[str, Any]] = {}
    for name in commands:
        merged = dict(common)
        merged.update({k.replace("-", "_"): v for k, v in data.get(name, {}).items()})
        default_map[name] = merged
    _logger.info("Loaded config %s", path)
    return default_map


def parse_layers(value: Union[str, Sequence[int], None]) -> Tuple[int, ...]:
    """``"-1,-7,-11"`` (or a list from a config file) to a tuple of ints."""
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = str(value).strip().strip("[]").split(",")
    try:
        layers = tuple(int(item.strip()) for item in items if item.strip())
    except ValueError:
        raise ConfigError(f"layers must be comma-separated integers, got {value!r}") from None
    if not layers:
        raise ConfigError("at least one layer is required")
    return layers


def parse_groups(value: Optional[str]) -> Tuple[Tuple[int, ...], ...]:
    """``"default"`` or ``"-1..-7;-8..-11"`` (ranges and comma lists separated by ``;``)."""
    if value is None or value.strip() == "default":
        return DEFAULT_LAYER_GROUPS
    groups: List[Tuple[int, ...]] = []
    for part in value.split(";"):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            try:
                start, stop = (int(x) for x in part.split(".."))
            except ValueError:
                raise ConfigError(f"bad layer range {part!r}") from None
            step = -1 if stop < start else 1
            groups.append(tuple(range(start, stop + step, step)))
        else:
            groups.append(parse_layers(part))
    if not groups:
        raise ConfigError("at least one layer group is required")
    return tuple(groups)


def parse_score_range(value: Union[str, Sequence[float], None]) -> Tuple[float, float]:
    if value is None:
        return DA_SCORE_RANGE
    items = value if isinstance(value, (list, tuple)) else str(value).strip().strip("[]").split(",")
    try:
        lo, hi = (float(str(x).strip()) for x in items)
    except ValueError:
        raise ConfigError(f"score range must be 'min,max', got {value!r}") from None
    if not lo < hi:
        raise ConfigError(f"score range must satisfy min < max, got {value!r}")
    return lo, hi


def make_strategy(
    kind: str,
    layers: Sequence[int],
    *,
    loss_weights: Optional[Sequence[float]] = None,
    bias: bool = False,
) -> HeadStrategy:
    return HeadStrategy(StrategyKind(kind), tuple(layers), tuple(loss_weights) if loss_weights else None, bias)


# -- inputs --------------------------------------------------------------------------


@dataclass
class Backbone:
    model: TransformerModel
    tokenizer: ByteTokenizer
    fresh: bool


def load_backbone(
    model_path: Optional[Path],
    tokenizer_path: Optional[Path],
    *,
    model_config: Optional[TransformerConfig] = None,
    seed: int = 0,
) -> Backbone:
    """Load a base checkpoint, or initialise one from ``model_config`` when none is given."""
    tokenizer = ByteTokenizer.load(tokenizer_path) if tokenizer_path else ByteTokenizer()
    if model_path is not None:
        model, fresh = TransformerModel.load(model_path), False
    else:
        _logger.warning("No base checkpoint given; initialising a random backbone with seed %d", seed)
        model, fresh = TransformerModel(model_config or TransformerConfig(), seed=seed), True
    if tokenizer.vocab_size > model.config.vocab_size:
        raise ConfigError(
            f"tokenizer has {tokenizer.vocab_size} ids but the model vocabulary is {model.config.vocab_size}"
        )
    return Backbone(model, tokenizer, fresh)


def read_template(path: Optional[Path]) -> Optional[str]:
    if path is None:
        return None
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read prompt template {path}: {exc}") from exc


def _encode(
    samples: Sequence[Sample], backbone: Backbone, template_text: Optional[str], scaler: ScoreScaler
) -> EncodedDataset:
    template = PromptTemplate.for_sample(samples[0], template_text)
    return encode_samples(
        samples, backbone.tokenizer, template, max_seq_len=backbone.model.config.max_seq_len, scaler=scaler
    )


def _auto_normalization(mode: Optional[str], dump_input: bool) -> NormalizationMode:
    if mode is not None:
        return NormalizationMode(mode)
    return NormalizationMode.NONE if dump_input else NormalizationMode.MINMAX


@dataclass
class Inputs:
    """Train/test features plus what is needed to write predictions in score units."""

    train: FeatureSource
    test: Optional[FeatureSource]
    scaler: ScoreScaler
    test_references: Optional[np.ndarray]
    backbone: Optional[Backbone] = None


def prepare_inputs(
    data: Path,
    test: Optional[Path],
    cfg: TrainConfig,
    *,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    model_path: Optional[Path] = None,
    tokenizer_path: Optional[Path] = None,
    model_config: Optional[TransformerConfig] = None,
    template_text: Optional[str] = None,
) -> Tuple[Inputs, TrainConfig]:
    """Build feature sources from a TSV dataset (live backbone) or an embedding dump (frozen path)."""
    if is_dump(data):
        if test is not None and not is_dump(test):
            raise ConfigError("training on an embedding dump needs a dump as the test set too")
        cfg = replace(cfg, frozen_backbone=True, use_lora=False)
        train_dump = read_dump(data)
        scaler = ScoreScaler.fit(train_dump.targets, cfg.normalization, score_range)
        test_dump = read_dump(test) if test is not None else None
        if test_dump is not None and (test_dump.n_layers, test_dump.layers, test_dump.hidden) != (
            train_dump.n_layers,
            train_dump.layers,
            train_dump.hidden,
        ):
            raise ConfigError("train and test dumps were exported with different layers or widths")
        return (
            Inputs(
                DumpFeatures(train_dump, scaler),
                DumpFeatures(test_dump, scaler) if test_dump is not None else None,
                scaler,
                test_dump.targets if test_dump is not None else None,
            ),
            cfg,
        )

    samples = load_tsv(data, score_range)
    if not samples:
        raise DataFormatError("dataset holds no samples", path=data)
    scaler = ScoreScaler.fit([s.score for s in samples], cfg.normalization, score_range)
    backbone = load_backbone(model_path, tokenizer_path, model_config=model_config, seed=cfg.seed)
    frozen = cfg.frozen_backbone or not cfg.use_lora
    train_set = BackboneFeatures(backbone.model, _encode(samples, backbone, template_text, scaler), frozen=frozen)
    test_set, refs = None, None
    if test is not None:
        test_samples = load_tsv(test, score_range)
        encoded = _encode(test_samples, backbone, template_text, scaler)
        test_set, refs = BackboneFeatures(backbone.model, encoded, frozen=frozen), encoded.raw_scores
    return Inputs(train_set, test_set, scaler, refs, backbone), cfg


def _finish(manifest: Optional[RunManifest], out_dir: Path, inputs: Sequence[Optional[Path]]) -> None:
    if manifest is None:
        return
    manifest.record_inputs(list(inputs))
    written = manifest.write(out_dir)
    _logger.info("Wrote %s", written)


# -- commands ------------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    out_dir: Path
    report: TrainReport
    written: List[Path] = field(default_factory=list)


def train_api(
    *,
    data: Path,
    out_dir: Path,
    cfg: TrainConfig,
    test: Optional[Path] = None,
    model_path: Optional[Path] = None,
    tokenizer_path: Optional[Path] = None,
    model_config: Optional[TransformerConfig] = None,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    normalization: Optional[str] = None,
    template_path: Optional[Path] = None,
    manifest: Optional[RunManifest] = None,
) -> TrainOutcome:
    """Train one head strategy and write checkpoints, report and (with ``test``) predictions."""
    out_dir = Path(out_dir)
    timings: Dict[str, float] = manifest.timings if manifest is not None else {}
    watch = Stopwatch(timings)
    cfg = replace(cfg, normalization=_auto_normalization(normalization, is_dump(data)))
    with watch.time("load"):
        inputs, cfg = prepare_inputs(
            data,
            test,
            cfg,
            score_range=score_range,
            model_path=model_path,
            tokenizer_path=tokenizer_path,
            model_config=model_config,
            template_text=read_template(template_path),
        )
    with watch.time("train"):
        result = train(inputs.train, cfg, validation=inputs.test)

    written: List[Path] = []
    head_path = save_head(out_dir / HEAD_FILE, result.head, cfg.strategy)
    written.append(head_path)
    if result.adapters:
        written.append(lora.save_adapters(out_dir / LORA_FILE, result.adapters, cfg.lora))
    if inputs.backbone is not None and inputs.backbone.fresh:
        written.append(inputs.backbone.model.save(out_dir / BASE_FILE))
        written.append(inputs.backbone.tokenizer.save(out_dir / TOKENIZER_FILE))
    if inputs.test is not None and inputs.test_references is not None:
        with watch.time("predict"):
            preds = inputs.scaler.inverse(predict(inputs.test, result.head))
        written.append(
            write_predictions(out_dir / PREDICTIONS_FILE, inputs.test.pair_ids, preds, inputs.test_references)
        )
    result.report.checkpoint = str(head_path)
    result.report.scaler = inputs.scaler.to_dict()
    written.append(result.report.write(out_dir / TRAIN_REPORT_FILE))
    for p in written:
        _logger.info("Wrote %s", p)
    _finish(manifest, out_dir, [data, test, model_path, tokenizer_path, template_path])
    return TrainOutcome(out_dir, result.report, written)


def sweep_api(
    *,
    data: Path,
    test: Path,
    out_dir: Path,
    cfg: TrainConfig,
    layers: Sequence[int] = (),
    kind: StrategyKind = StrategyKind.VANILLA,
    groups: Sequence[Sequence[int]] = DEFAULT_LAYER_GROUPS,
    workers: int = 1,
    alpha: float = 0.05,
    two_sided: bool = False,
    xlsx: bool = False,
    model_path: Optional[Path] = None,
    tokenizer_path: Optional[Path] = None,
    model_config: Optional[TransformerConfig] = None,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    normalization: Optional[str] = None,
    template_path: Optional[Path] = None,
    manifest: Optional[RunManifest] = None,
) -> Report:
    """Independent runs per layer (vanilla) or per layer group (dynamic/multihead), reported as a grid."""
    out_dir = Path(out_dir)
    timings: Dict[str, float] = manifest.timings if manifest is not None else {}
    watch = Stopwatch(timings)
    cfg = replace(cfg, normalization=_auto_normalization(normalization, is_dump(data)))
    with watch.time("load"):
        inputs, cfg = prepare_inputs(
            data,
            test,
            cfg,
            score_range=score_range,
            model_path=model_path,
            tokenizer_path=tokenizer_path,
            model_config=model_config,
            template_text=read_template(template_path),
        )
    assert inputs.test is not None
    kind = StrategyKind(kind)
    with watch.time("sweep"):
        if kind is StrategyKind.VANILLA:
            result = layer_sweep(inputs.train, inputs.test, layers, cfg, workers=workers)
        else:
            strategies = group_strategies(kind, groups, bias=cfg.strategy.bias)
            result = strategy_sweep(inputs.train, inputs.test, strategies, cfg, workers=workers)
    title = f"{kind.value} sweep, Spearman per pair"
    report = report_from_sweep(result, alpha=alpha, two_sided=two_sided, title=title)
    report.write(out_dir / SWEEP_STEM, xlsx=xlsx)
    for pair in result.pairs:
        best = result.best(pair)
        _logger.info("best for %s: %s", pair, best.label if best else "none")
    _finish(manifest, out_dir, [data, test, model_path, tokenizer_path, template_path])
    return report


def eval_api(
    *,
    predictions: Path,
    out_dir: Path,
    references: Optional[Path] = None,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    manifest: Optional[RunManifest] = None,
) -> List[Dict[str, Any]]:
    """Per-pair Spearman and Pearson of a prediction file."""
    preds = read_predictions(predictions)
    if references is not None:
        preds = preds.with_references([s.score for s in load_tsv(references, score_range)])
    rows = metrics_table(preds)
    for p in write_table(Path(out_dir) / METRICS_STEM, rows, METRIC_COLUMNS):
        _logger.info("Wrote %s", p)
    _finish(manifest, Path(out_dir), [predictions, references])
    return rows


def compare_api(
    *,
    predictions_a: Path,
    predictions_b: Path,
    out_dir: Path,
    references: Optional[Path] = None,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    alpha: float = 0.05,
    two_sided: bool = False,
    manifest: Optional[RunManifest] = None,
) -> List[Dict[str, Any]]:
    """Williams test of system A over system B per pair."""
    a = read_predictions(predictions_a)
    b = read_predictions(predictions_b)
    if references is not None:
        scores = [s.score for s in load_tsv(references, score_range)]
        a, b = a.with_references(scores), b.with_references(scores)
    rows = compare_table(a, b, alpha=alpha, two_sided=two_sided)
    for p in write_table(Path(out_dir) / COMPARE_STEM, rows, COMPARE_COLUMNS):
        _logger.info("Wrote %s", p)
    _finish(manifest, Path(out_dir), [predictions_a, predictions_b, references])
    return rows


def export_embeddings_api(
    *,
    data: Path,
    out_dir: Path,
    layers: Sequence[int],
    model_path: Optional[Path] = None,
    tokenizer_path: Optional[Path] = None,
    model_config: Optional[TransformerConfig] = None,
    score_range: Sequence[float] = DA_SCORE_RANGE,
    template_path: Optional[Path] = None,
    batch_size: int = 16,
    seed: int = 0,
    manifest: Optional[RunManifest] = None,
) -> EmbeddingDump:
    """Run the backbone over ``data`` and dump final-token states of ``layers`` (raw scores as targets)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    samples = load_tsv(data, score_range)
    backbone = load_backbone(model_path, tokenizer_path, model_config=model_config, seed=seed)
    n_layers = backbone.model.config.n_layers
    resolved = sorted({resolve_layer(x, n_layers) for x in layers})
    encoded = _encode(samples, backbone, read_template(template_path), ScoreScaler())
    chunks: List[np.ndarray] = []
    with ad.no_grad():
        for start in range(0, len(encoded), batch_size):
            idx = np.arange(start, min(start + batch_size, len(encoded)))
            trace = backbone.model.forward(*encoded.batch(idx))
            chunks.append(np.stack([trace.final_token_states(k).numpy() for k in resolved], axis=1))
    embeddings = np.concatenate(chunks, axis=0)
    dump = EmbeddingDump(tuple(resolved), n_layers, embeddings, encoded.raw_scores, encoded.pair_ids)
    source = str(model_path) if model_path is not None else f"random-init(seed={seed})"
    write_dump(Path(out_dir) / DUMP_FILE, dump, source_model=source)
    if backbone.fresh:
        backbone.model.save(Path(out_dir) / BASE_FILE)
    _finish(manifest, Path(out_dir), [data, model_path, tokenizer_path, template_path])
    return dump


def gen_synth_api(
    *,
    kind: SynthKind,
    out_dir: Path,
    n: int,
    seed: int = 0,
    split: bool = False,
    layer: int = -1,
    n_layers: int = 8,
    hidden: int = 16,
    noise: float = 0.1,
    model_config: Optional[TransformerConfig] = None,
    vocab_size: int = 258,
    manifest: Optional[RunManifest] = None,
) -> List[Path]:
    """Write seeded synthetic datasets, planted-signal dumps or a random base model."""
    out_dir = Path(out_dir)
    kind = SynthKind(kind)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    total = n + max(1, int(round(n * TEST_PER_TRAIN))) if split else n
    written: List[Path] = []
    if kind in (SynthKind.QE, SynthKind.INTENSITY):
        generate = generate_qe_samples if kind is SynthKind.QE else generate_intensity_samples
        samples: List[Sample] = list(generate(total, seed=seed))
        if split:
            train_rows, test_rows = split_train_test(samples, seed=seed)
            written += [write_tsv(out_dir / "train.tsv", train_rows), write_tsv(out_dir / "test.tsv", test_rows)]
        else:
            written.append(write_tsv(out_dir / "data.tsv", samples))
        _logger.info("Rows per pair: %s", pair_counts(samples))
    elif kind is SynthKind.DUMP:
        dump = planted_dump(total, layer=layer, n_layers=n_layers, hidden=hidden, noise=noise, seed=seed)
        source = f"planted(layer={layer}, seed={seed})"
        if split:
            train_dump, test_dump = split_dump(dump, seed=seed)
            written += [
                write_dump(out_dir / "train.alpe", train_dump, source_model=source),
                write_dump(out_dir / "test.alpe", test_dump, source_model=source),
            ]
        else:
            written.append(write_dump(out_dir / "data.alpe", dump, source_model=source))
    else:
        config = model_config or TransformerConfig()
        if vocab_size > 258:
            corpus = [f"{s.source_text}\n{s.translated_text}" for s in generate_qe_samples(n, seed=seed)]
            tokenizer = ByteTokenizer.train(corpus, vocab_size)
        else:
            tokenizer = ByteTokenizer()
        if tokenizer.vocab_size > config.vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} exceeds the model vocabulary {config.vocab_size}")
        written.append(TransformerModel(config, seed=seed).save(out_dir / BASE_FILE))
        written.append(tokenizer.save(out_dir / TOKENIZER_FILE))
    for p in written:
        _logger.info("Wrote %s", p)
    _finish(manifest, out_dir, [])
    return written
