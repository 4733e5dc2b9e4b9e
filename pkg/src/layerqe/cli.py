"""
To install run ``pip install .`` (or ``pip install -e .`` for editable mode)
which will install the command layerqe inside your current environment.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click

from layerqe import __version__
from layerqe.api import (
    CONFIG_ENVVAR,
    SynthKind,
    compare_api,
    eval_api,
    export_embeddings_api,
    gen_synth_api,
    load_config,
    make_strategy,
    parse_groups,
    parse_layers,
    parse_score_range,
    setup_logging,
    sweep_api,
    train_api,
)
from layerqe.artifacts import RunManifest, read_manifest
from layerqe.errors import ConfigError, LayerIndexError, LayerQEError
from layerqe.heads import DEFAULT_SWEEP_LAYERS, StrategyKind
from layerqe.lora import LoraConfig
from layerqe.optim import OptimizerKind
from layerqe.train import TrainConfig
from layerqe.transformer import ATTENTION_PROJECTIONS, TransformerConfig

RUNTIME_FAILURE_EXIT_CODE = 1
USAGE_EXIT_CODE = 2

_logger = logging.getLogger(__name__)

_ARGV_KEY = "layerqe.argv"
_EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
_OUT_DIR = click.Path(file_okay=False, path_type=Path)


class LayerQEGroup(click.Group):
    """Records the raw argument list for manifests and maps library errors onto exit codes."""

    def parse_args(self, ctx: click.Context, args: List[str]) -> List[str]:
        ctx.meta[_ARGV_KEY] = list(args)
        return super().parse_args(ctx, args)

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (ConfigError, LayerIndexError) as exc:
            raise click.UsageError(str(exc), ctx) from exc
        except LayerQEError as exc:
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(RUNTIME_FAILURE_EXIT_CODE)


def _manifest(ctx: click.Context, seed: Optional[int] = None) -> RunManifest:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in ctx.params.items()}
    return RunManifest(command=ctx.info_name or "", argv=list(ctx.meta.get(_ARGV_KEY, [])), config=config, seed=seed)


def _layers_option(default: Optional[str], help_text: str) -> Callable:
    def callback(ctx: click.Context, param: click.Parameter, value: Any) -> Any:
        try:
            return parse_layers(value)
        except ConfigError as exc:
            raise click.BadParameter(str(exc), ctx=ctx, param=param) from exc

    return click.option("--layers", default=default, show_default=True, callback=callback, help=help_text)


def _score_range_callback(ctx: click.Context, param: click.Parameter, value: Any) -> Any:
    try:
        return parse_score_range(value)
    except ConfigError as exc:
        raise click.BadParameter(str(exc), ctx=ctx, param=param) from exc


def _backbone_options(fn: Callable) -> Callable:
    """Options shared by every command that may run the backbone."""
    options = [
        click.option(
            "--model", "model_path", type=_EXISTING_FILE, default=None, help="Base model checkpoint (.lqck)."
        ),
        click.option(
            "--tokenizer",
            "tokenizer_path",
            type=_EXISTING_FILE,
            default=None,
            help="Tokenizer JSON (default: plain bytes).",
        ),
        click.option(
            "--template", "template_path", type=_EXISTING_FILE, default=None, help="Prompt template text file."
        ),
        click.option(
            "--score-range",
            default="0,100",
            show_default=True,
            callback=_score_range_callback,
            help="Valid score range 'min,max'.",
        ),
        click.option(
            "--n-layers",
            default=8,
            show_default=True,
            type=click.IntRange(min=1),
            help="Depth of a freshly initialised backbone.",
        ),
        click.option(
            "--d-model",
            default=64,
            show_default=True,
            type=click.IntRange(min=1),
            help="Width of a freshly initialised backbone.",
        ),
        click.option(
            "--n-heads",
            default=4,
            show_default=True,
            type=click.IntRange(min=1),
            help="Attention heads of a fresh backbone.",
        ),
        click.option(
            "--d-ff",
            default=172,
            show_default=True,
            type=click.IntRange(min=1),
            help="Feed-forward width of a fresh backbone.",
        ),
        click.option(
            "--max-seq-len",
            default=256,
            show_default=True,
            type=click.IntRange(min=2),
            help="Context length of a fresh backbone.",
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _training_options(fn: Callable) -> Callable:
    options = [
        click.option("--data", type=_EXISTING_FILE, required=True, help="Training TSV or embedding dump."),
        click.option("--out", "out_dir", type=_OUT_DIR, required=True, help="Output directory."),
        click.option("--epochs", default=3, show_default=True, type=click.IntRange(min=0)),
        click.option("--batch-size", default=16, show_default=True, type=click.IntRange(min=1)),
        click.option("--learning-rate", "--lr", "learning_rate", default=2e-4, show_default=True, type=float),
        click.option("--weight-decay", default=0.0, show_default=True, type=float),
        click.option(
            "--optimizer", type=click.Choice([k.value for k in OptimizerKind]), default="adamw", show_default=True
        ),
        click.option(
            "--grad-clip",
            default=1.0,
            show_default=True,
            type=click.FloatRange(min=0),
            help="Max global grad norm; 0 disables clipping.",
        ),
        click.option(
            "--eval-every",
            default=0,
            show_default=True,
            type=click.IntRange(min=0),
            help="Log validation Spearman every N steps.",
        ),
        click.option("--seed", default=0, show_default=True, type=int, help="Seed for every source of randomness."),
        click.option("--lora-rank", default=32, show_default=True, type=click.IntRange(min=1)),
        click.option("--lora-scale", default=1.0, show_default=True, type=float),
        click.option(
            "--lora-targets", default=",".join(ATTENTION_PROJECTIONS), show_default=True, help="Projections to adapt."
        ),
        click.option(
            "--no-lora", is_flag=True, default=False, help="Train heads on the frozen backbone without adapters."
        ),
        click.option(
            "--frozen-backbone", is_flag=True, default=False, help="Never adapt the backbone (implied for dumps)."
        ),
        click.option("--heads-only", is_flag=True, default=False, help="Inject adapters but train only the heads."),
        click.option("--bias/--no-bias", default=False, show_default=True, help="Give regression heads a bias term."),
        click.option(
            "--normalize",
            type=click.Choice(["none", "minmax", "zscore"]),
            default=None,
            help="Target scaling (default: minmax for TSV, none for dumps).",
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return _backbone_options(fn)


def _parse_loss_weights(loss_weights: Optional[str]) -> Optional[List[float]]:
    if not loss_weights:
        return None
    try:
        return [float(w) for w in loss_weights.split(",")]
    except ValueError as exc:
        raise click.BadParameter(
            f"not a comma separated list of numbers: {loss_weights!r}", param_hint="--loss-weights"
        ) from exc


def _train_config(strategy_kind: str, layers, loss_weights: Optional[str], params: Dict[str, Any]) -> TrainConfig:
    weights = _parse_loss_weights(loss_weights)
    return TrainConfig(
        strategy=make_strategy(strategy_kind, layers, loss_weights=weights, bias=params["bias"]),
        epochs=params["epochs"],
        batch_size=params["batch_size"],
        learning_rate=params["learning_rate"],
        weight_decay=params["weight_decay"],
        optimizer=OptimizerKind(params["optimizer"]),
        seed=params["seed"],
        grad_clip=params["grad_clip"] or None,
        eval_every=params["eval_every"],
        frozen_backbone=params["frozen_backbone"],
        use_lora=not params["no_lora"],
        heads_only=params["heads_only"],
        lora=LoraConfig(
            rank=params["lora_rank"],
            scale=params["lora_scale"],
            targets=tuple(t.strip() for t in params["lora_targets"].split(",") if t.strip()),
        ),
    )


def _model_config(params: Dict[str, Any]) -> TransformerConfig:
    return TransformerConfig(
        n_layers=params["n_layers"],
        d_model=params["d_model"],
        n_heads=params["n_heads"],
        d_ff=params["d_ff"],
        max_seq_len=params["max_seq_len"],
    )


def _backbone_kwargs(params: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "model_path": params["model_path"],
        "tokenizer_path": params["tokenizer_path"],
        "template_path": params["template_path"],
        "score_range": params["score_range"],
        "model_config": _model_config(params),
    }


@click.group(cls=LayerQEGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, "--version")
@click.option("-v", "--verbose", "loglevel", flag_value=logging.INFO, default=None, help="Info logging.")
@click.option("-vv", "--very-verbose", "loglevel", flag_value=logging.DEBUG, default=None, help="Debug logging.")
@click.option(
    "--config",
    "config_path",
    type=_EXISTING_FILE,
    envvar=CONFIG_ENVVAR,
    default=None,
    show_envvar=True,
    help="TOML file with option defaults (per-command tables allowed).",
)
@click.pass_context
def cli(ctx: click.Context, loglevel: Optional[int], config_path: Optional[Path]) -> None:
    """Layer-adaptive regression heads for quality estimation."""
    setup_logging(loglevel)
    if config_path is not None:
        ctx.default_map = load_config(config_path, ctx.command.commands)


_STRATEGY_CHOICE = click.Choice([k.value for k in StrategyKind])
_ALPHA = click.FloatRange(0, 1, min_open=True, max_open=True)
_SWEEP_LAYERS_DEFAULT = ",".join(str(x) for x in DEFAULT_SWEEP_LAYERS)


def _fmt(value: Optional[float], spec: str) -> str:
    return "NA" if value is None else format(value, spec)


@cli.command()
@_training_options
@click.option("--test", type=_EXISTING_FILE, default=None, help="Held-out TSV or dump; enables predictions.tsv.")
@click.option("--strategy", type=_STRATEGY_CHOICE, default="vanilla", show_default=True)
@_layers_option("-1", "Layer(s) to read, negative from the last.")
@click.option("--loss-weights", default=None, help="Multihead loss weights, comma separated (default uniform).")
@click.pass_context
def train(
    ctx: click.Context,
    strategy: str,
    layers,
    loss_weights: Optional[str],
    test: Optional[Path],
    **params: Any,
) -> None:
    """Train one head strategy (with LoRA unless --no-lora)."""
    cfg = _train_config(strategy, layers, loss_weights, params)
    outcome = train_api(
        data=params["data"],
        test=test,
        out_dir=params["out_dir"],
        cfg=cfg,
        normalization=params["normalize"],
        manifest=_manifest(ctx, cfg.seed),
        **_backbone_kwargs(params),
    )
    report = outcome.report
    click.echo(f"{cfg.strategy.label}: {report.steps} step(s), final loss {_fmt(report.final_loss, '.6g')}")
    click.echo(f"Wrote: {outcome.out_dir}")


@cli.command()
@_training_options
@click.option("--test", type=_EXISTING_FILE, required=True, help="Held-out TSV or dump scored per pair.")
@click.option("--strategy", type=_STRATEGY_CHOICE, default="vanilla", show_default=True)
@_layers_option(_SWEEP_LAYERS_DEFAULT, "Layers for a vanilla sweep.")
@click.option(
    "--groups",
    default="default",
    show_default=True,
    help="Layer groups for dynamic/multihead, e.g. '-1..-7;-8..-11'.",
)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1), help="Runs trained in parallel.")
@click.option("--alpha", default=0.05, show_default=True, type=_ALPHA)
@click.option("--two-sided", is_flag=True, default=False, help="Two-sided Williams tests for the significance marks.")
@click.option("--xlsx", is_flag=True, default=False, help="Also write sweep.xlsx.")
@click.pass_context
def sweep(
    ctx: click.Context,
    strategy: str,
    layers,
    groups: str,
    workers: int,
    alpha: float,
    two_sided: bool,
    xlsx: bool,
    test: Path,
    **params: Any,
) -> None:
    """Independent runs over layers (or layer groups), reported per language pair."""
    try:
        parsed_groups = parse_groups(groups)
    except ConfigError as exc:
        raise click.BadParameter(str(exc), param_hint="--groups") from exc
    cfg = _train_config("vanilla", (-1,), None, params)
    report = sweep_api(
        data=params["data"],
        test=test,
        out_dir=params["out_dir"],
        cfg=cfg,
        layers=layers,
        kind=StrategyKind(strategy),
        groups=parsed_groups,
        workers=workers,
        alpha=alpha,
        two_sided=two_sided,
        xlsx=xlsx,
        normalization=params["normalize"],
        manifest=_manifest(ctx, cfg.seed),
        **_backbone_kwargs(params),
    )
    click.echo(report.render_csv(), nl=False)


@cli.command("eval")
@click.argument("predictions", type=_EXISTING_FILE)
@click.option(
    "--references", type=_EXISTING_FILE, default=None, help="Dataset TSV whose scores replace the reference column."
)
@click.option("--score-range", default="0,100", show_default=True, callback=_score_range_callback)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True, help="Output directory.")
@click.pass_context
def eval_cmd(ctx: click.Context, predictions: Path, references: Optional[Path], score_range, out_dir: Path) -> None:
    """Per-pair Spearman and Pearson for a prediction file."""
    rows = eval_api(
        predictions=predictions,
        references=references,
        score_range=score_range,
        out_dir=out_dir,
        manifest=_manifest(ctx),
    )
    for row in rows:
        spearman, pearson = _fmt(row["spearman"], ".3f"), _fmt(row["pearson"], ".3f")
        click.echo(f"{row['pair_id']}\tn={row['n']}\tspearman={spearman}\tpearson={pearson}")


@cli.command()
@click.argument("predictions_a", type=_EXISTING_FILE)
@click.argument("predictions_b", type=_EXISTING_FILE)
@click.option(
    "--references", type=_EXISTING_FILE, default=None, help="Dataset TSV whose scores replace the reference column."
)
@click.option("--score-range", default="0,100", show_default=True, callback=_score_range_callback)
@click.option("--alpha", default=0.05, show_default=True, type=_ALPHA)
@click.option("--two-sided", is_flag=True, default=False)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True, help="Output directory.")
@click.pass_context
def compare(
    ctx: click.Context,
    predictions_a: Path,
    predictions_b: Path,
    references: Optional[Path],
    score_range,
    alpha: float,
    two_sided: bool,
    out_dir: Path,
) -> None:
    """Williams test: is system A's Spearman significantly higher than system B's?"""
    rows = compare_api(
        predictions_a=predictions_a,
        predictions_b=predictions_b,
        references=references,
        score_range=score_range,
        alpha=alpha,
        two_sided=two_sided,
        out_dir=out_dir,
        manifest=_manifest(ctx),
    )
    for row in rows:
        t, p = _fmt(row["t"], ".4f"), _fmt(row["p_value"], ".4g")
        click.echo(f"{row['pair_id']}\tt={t}\tp={p}\t{row['verdict']}")


@cli.command("export-embeddings")
@click.option("--data", type=_EXISTING_FILE, required=True, help="Dataset TSV.")
@click.option("--out", "out_dir", type=_OUT_DIR, required=True, help="Output directory.")
@_layers_option(_SWEEP_LAYERS_DEFAULT, "Layers to export.")
@click.option("--batch-size", default=16, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int, help="Seed for a freshly initialised backbone.")
@_backbone_options
@click.pass_context
def export_embeddings(
    ctx: click.Context,
    data: Path,
    out_dir: Path,
    layers,
    batch_size: int,
    seed: int,
    **params: Any,
) -> None:
    """Write final-token embeddings of the chosen layers for the frozen path."""
    dump = export_embeddings_api(
        data=data,
        out_dir=out_dir,
        layers=layers,
        batch_size=batch_size,
        seed=seed,
        manifest=_manifest(ctx, seed),
        **_backbone_kwargs(params),
    )
    click.echo(f"Exported {dump.n_samples} sample(s) x layers {list(dump.layers)} to {out_dir}")


@cli.command("gen-synth")
@click.option("--kind", type=click.Choice([k.value for k in SynthKind]), default="qe", show_default=True)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True, help="Output directory.")
@click.option(
    "--n", default=64, show_default=True, type=click.IntRange(min=1), help="Rows (training rows with --split)."
)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--split", is_flag=True, default=False, help="Write train/test files (seven training rows per test row).")
@click.option("--layer", default=-1, show_default=True, type=int, help="Signal layer of a planted dump.")
@click.option(
    "--hidden", default=16, show_default=True, type=click.IntRange(min=1), help="Embedding width of a planted dump."
)
@click.option("--noise", default=0.1, show_default=True, type=click.FloatRange(min=0))
@click.option(
    "--vocab-size",
    default=258,
    show_default=True,
    type=click.IntRange(258, 4096),
    help="Tokenizer size for --kind model.",
)
@click.option("--n-layers", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--d-model", default=64, show_default=True, type=click.IntRange(min=1))
@click.option("--n-heads", default=4, show_default=True, type=click.IntRange(min=1))
@click.option("--d-ff", default=172, show_default=True, type=click.IntRange(min=1))
@click.option("--max-seq-len", default=256, show_default=True, type=click.IntRange(min=2))
@click.pass_context
def gen_synth(
    ctx: click.Context,
    kind: str,
    out_dir: Path,
    n: int,
    seed: int,
    split: bool,
    layer: int,
    hidden: int,
    noise: float,
    vocab_size: int,
    **params: Any,
) -> None:
    """Seeded synthetic QE/intensity data, planted-signal dumps or a random base model."""
    written = gen_synth_api(
        kind=SynthKind(kind),
        out_dir=out_dir,
        n=n,
        seed=seed,
        split=split,
        layer=layer,
        n_layers=params["n_layers"],
        hidden=hidden,
        noise=noise,
        vocab_size=vocab_size,
        model_config=_model_config(params),
        manifest=_manifest(ctx, seed),
    )
    for path in written:
        click.echo(f"Wrote: {path}")


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, path_type=Path))
@click.pass_context
def rerun(ctx: click.Context, manifest: Path) -> None:
    """Re-execute a command from its manifest.json (or the directory holding it)."""
    recorded = read_manifest(manifest)
    if not recorded.argv or recorded.argv[0] == "rerun":
        raise click.UsageError(f"{manifest} does not record a rerunnable command")
    _logger.info("Rerunning %s: %s", recorded.command, " ".join(recorded.argv))
    code = cli.main(args=list(recorded.argv), prog_name="layerqe", standalone_mode=False)
    if isinstance(code, int) and code:
        ctx.exit(code)


if __name__ == "__main__":
    cli()
