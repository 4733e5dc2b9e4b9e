"""Datasets, prompts, score scaling and the embedding dump format.

Two TSV layouts are understood (UTF-8, tab separated, header required):

* quality estimation: ``src_lang, tgt_lang, src, mt, score[, pair_id]``
* single-text regression: ``lang, text, score[, pair_id]``

An :class:`EmbeddingDump` stores per-layer final-token embeddings plus targets
so heads can be trained without a live backbone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import string
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from layerqe.artifacts import atomic_write_bytes, atomic_write_json
from layerqe.autodiff import Tensor
from layerqe.errors import (
    ConfigError,
    DataFormatError,
    DumpFormatError,
    DumpTruncatedError,
    LayerIndexError,
    ScoreRangeError,
)
from layerqe.tokenizer import BOS_ID, PAD_ID, ByteTokenizer
from layerqe.transformer import resolve_layer

_logger = logging.getLogger(__name__)

QE_COLUMNS = ("src_lang", "tgt_lang", "src", "mt", "score")
TEXT_COLUMNS = ("lang", "text", "score")
DA_SCORE_RANGE = (0.0, 100.0)
INTENSITY_SCORE_RANGE = (0.0, 1.0)
DEFAULT_MAX_SEQ_LEN = 256

QE_PLACEHOLDERS = ("source_lang", "target_lang", "source_text", "translated_text")
TEXT_PLACEHOLDERS = ("language", "text")

# Instruction, 0-100 scale, source, translation; the translation slot comes last
# so the final token of every prompt is the end of the translated sentence.
DEFAULT_QE_TEMPLATE = (
    "Score the following translation from {source_lang} to {target_lang} on a continuous scale "
    "from 0 to 100, where 0 means no meaning preserved and 100 means perfect meaning and grammar.\n"
    "Source: {source_text}\n"
    "Translation: {translated_text}"
)
DEFAULT_INTENSITY_TEMPLATE = (
    "Rate the intensity of the emotion expressed in the following {language} text on a continuous "
    "scale from 0 to 1, where 0 means the least intensity and 1 the most.\n"
    "Text: {text}"
)


@dataclass(frozen=True)
class QESample:
    source_lang: str
    target_lang: str
    source_text: str
    translated_text: str
    score: float
    pair_id: str

    def prompt_fields(self) -> Dict[str, str]:
        return {
            "source_lang": self.source_lang,
            "target_lang": self.target_lang,
            "source_text": self.source_text,
            "translated_text": self.translated_text,
        }


@dataclass(frozen=True)
class TextSample:
    """One single-text regression example (e.g. emotion intensity)."""

    language: str
    text: str
    score: float
    pair_id: str

    def prompt_fields(self) -> Dict[str, str]:
        return {"language": self.language, "text": self.text}


Sample = Union[QESample, TextSample]


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt with named ``{placeholder}`` slots, each required exactly once."""

    text: str = DEFAULT_QE_TEMPLATE
    placeholders: Tuple[str, ...] = QE_PLACEHOLDERS

    def __post_init__(self) -> None:
        try:
            found = [name for _, name, _, _ in string.Formatter().parse(self.text) if name is not None]
        except ValueError as exc:
            raise ConfigError(f"malformed prompt template: {exc}") from exc
        counts = Counter(found)
        unknown = sorted(set(counts) - set(self.placeholders))
        if unknown:
            raise ConfigError(f"prompt template uses unknown placeholder(s) {unknown}")
        missing = [p for p in self.placeholders if counts[p] == 0]
        if missing:
            raise ConfigError(f"prompt template is missing placeholder(s) {missing}")
        repeated = sorted(p for p, n in counts.items() if n > 1)
        if repeated:
            raise ConfigError(f"placeholder(s) {repeated} appear more than once")

    @classmethod
    def intensity(cls, text: str = DEFAULT_INTENSITY_TEMPLATE) -> "PromptTemplate":
        return cls(text, TEXT_PLACEHOLDERS)

    @classmethod
    def for_sample(cls, sample: Sample, text: Optional[str] = None) -> "PromptTemplate":
        if isinstance(sample, TextSample):
            return cls.intensity(text or DEFAULT_INTENSITY_TEMPLATE)
        return cls(text or DEFAULT_QE_TEMPLATE)

    def render(self, fields: Mapping[str, str]) -> str:
        missing = [p for p in self.placeholders if p not in fields]
        if missing:
            raise ConfigError(f"no value for placeholder(s) {missing}")
        return self.text.format_map({p: fields[p] for p in self.placeholders})


def build_prompt(sample: Sample, template: PromptTemplate) -> str:
    return template.render(sample.prompt_fields())


# -- loading ---------------------------------------------------------------------


def _parse_range(score_range: Sequence[float]) -> Tuple[float, float]:
    lo, hi = (float(x) for x in score_range)
    if not lo < hi:
        raise ConfigError(f"score range must satisfy min < max, got [{lo}, {hi}]")
    return lo, hi


def load_tsv(path: Path, score_range: Sequence[float] = DA_SCORE_RANGE) -> List[Sample]:
    """Parse a QE (or single-text) TSV file, validating every score against ``score_range``."""
    path = Path(path)
    lo, hi = _parse_range(score_range)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read dataset: {exc}", path=path) from exc

    reader = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\")
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError("empty file (header row required)", path=path, line=1) from None

    if all(c in header for c in QE_COLUMNS):
        kind, required = "qe", QE_COLUMNS
    elif all(c in header for c in TEXT_COLUMNS):
        kind, required = "text", TEXT_COLUMNS
    else:
        raise DataFormatError(
            f"header must contain {list(QE_COLUMNS)} or {list(TEXT_COLUMNS)}, got {header}", path=path, line=1
        )
    col = {name: header.index(name) for name in header}

    samples: List[Sample] = []
    for row in reader:
        line_no = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", path=path, line=line_no)
        values = {name: row[i] for name, i in col.items()}
        try:
            score = float(values["score"])
        except ValueError:
            raise DataFormatError(f"score {values['score']!r} is not a number", path=path, line=line_no) from None
        if not np.isfinite(score) or not lo <= score <= hi:
            raise ScoreRangeError(f"score {score:g} outside range [{lo:g}, {hi:g}]", path=path, line=line_no)
        if any(not values[c].strip() for c in required if c != "score"):
            raise DataFormatError("empty text or language field", path=path, line=line_no)
        if kind == "qe":
            pair_id = values.get("pair_id") or f"{values['src_lang']}-{values['tgt_lang']}"
            samples.append(
                QESample(values["src_lang"], values["tgt_lang"], values["src"], values["mt"], score, pair_id)
            )
        else:
            samples.append(TextSample(values["lang"], values["text"], score, values.get("pair_id") or values["lang"]))

    counts = pair_counts(samples)
    _logger.info("Loaded %d sample(s) from %s", len(samples), path)
    for pair, n in counts.items():
        _logger.info("  %s: %d", pair, n)
    return samples


def pair_counts(samples: Sequence[Sample]) -> Dict[str, int]:
    """Samples per language pair, in first-seen order."""
    counts: Dict[str, int] = {}
    for s in samples:
        counts[s.pair_id] = counts.get(s.pair_id, 0) + 1
    return counts


def write_tsv(path: Path, samples: Sequence[Sample]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
    if samples and isinstance(samples[0], TextSample):
        writer.writerow([*TEXT_COLUMNS, "pair_id"])
        for s in samples:
            writer.writerow([s.language, s.text, repr(float(s.score)), s.pair_id])
    else:
        writer.writerow([*QE_COLUMNS, "pair_id"])
        for s in samples:
            writer.writerow(
                [s.source_lang, s.target_lang, s.source_text, s.translated_text, repr(float(s.score)), s.pair_id]
            )
    return atomic_write_bytes(Path(path), buf.getvalue().encode("utf-8"))


# -- score normalisation --------------------------------------------------------------


class NormalizationMode(str, Enum):
    NONE = "none"
    MINMAX = "minmax"
    ZSCORE = "zscore"


@dataclass(frozen=True)
class ScoreScaler:
    """Affine map applied to training targets, ``y' = (y - shift) / scale``."""

    mode: NormalizationMode = NormalizationMode.NONE
    shift: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(
        cls, scores: Sequence[float], mode: Union[str, NormalizationMode], score_range: Sequence[float]
    ) -> "ScoreScaler":
        mode = NormalizationMode(mode)
        if mode is NormalizationMode.NONE:
            return cls(mode)
        if mode is NormalizationMode.MINMAX:
            lo, hi = _parse_range(score_range)
            return cls(mode, lo, hi - lo)
        values = np.asarray(scores, dtype=np.float64)
        std = float(values.std()) if values.size else 0.0
        if values.size < 2 or std == 0.0:
            raise ConfigError("z-score normalisation needs at least two distinct scores")
        return cls(mode, float(values.mean()), std)

    def transform(self, scores: Union[Sequence[float], np.ndarray]) -> np.ndarray:
        return (np.asarray(scores, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, values: Union[Sequence[float], np.ndarray]) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.shift

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode.value, "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScoreScaler":
        return cls(NormalizationMode(data["mode"]), float(data["shift"]), float(data["scale"]))


def normalize_scores(
    samples: Sequence[Sample], mode: Union[str, NormalizationMode], score_range: Sequence[float] = DA_SCORE_RANGE
) -> Tuple[List[Sample], ScoreScaler]:
    """Return samples with transformed scores and the scaler that inverts the change."""
    scaler = ScoreScaler.fit([s.score for s in samples], mode, score_range)
    scaled = scaler.transform([s.score for s in samples])
    return [replace(s, score=float(v)) for s, v in zip(samples, scaled)], scaler


# -- encoding ------------------------------------------------------------------------


def truncate_head_tail(ids: Sequence[int], max_len: int) -> List[int]:
    """Keep the first and last tokens so the sequence fits ``max_len``.

    The head keeps the prompt scaffold, the tail keeps the end of the text slot
    (and therefore the final token).
    """
    ids = list(ids)
    if len(ids) <= max_len:
        return ids
    head = max_len // 2
    return ids[:head] + ids[len(ids) - (max_len - head) :]


@dataclass(frozen=True)
class EncodedDataset:
    """Right-padded token matrix for a list of samples."""

    token_ids: np.ndarray  # [N, T] int64
    lengths: np.ndarray  # [N]
    targets: np.ndarray  # [N] float64, already normalised
    pair_ids: Tuple[str, ...]
    raw_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def batch(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Token ids and pad mask for ``indices``, trimmed to the longest row."""
        lengths = self.lengths[indices]
        width = int(lengths.max())
        mask = np.arange(width)[None, :] < lengths[:, None]
        return self.token_ids[indices, :width], mask


def encode_samples(
    samples: Sequence[Sample],
    tokenizer: ByteTokenizer,
    template: Optional[PromptTemplate] = None,
    *,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    scaler: Optional[ScoreScaler] = None,
) -> EncodedDataset:
    if not samples:
        raise DataFormatError("no samples to encode")
    template = template or PromptTemplate.for_sample(samples[0])
    rows = [truncate_head_tail(tokenizer.encode(build_prompt(s, template)), max_seq_len) for s in samples]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    token_ids = np.full((len(rows), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        token_ids[i, : len(row)] = row
    raw = np.array([s.score for s in samples], dtype=np.float64)
    targets = scaler.transform(raw) if scaler is not None else raw.copy()
    assert (token_ids[:, 0] == BOS_ID).all()
    return EncodedDataset(token_ids, lengths, targets, tuple(s.pair_id for s in samples), raw)


# -- embedding dumps ---------------------------------------------------------------------

DUMP_MAGIC = b"ALPE"
DUMP_VERSION = 1
_DUMP_PREFIX = struct.Struct("<4sHI")  # magic, version, header length


@dataclass(frozen=True)
class EmbeddingDump:
    """Final-token embeddings for ``layers`` of a model, with aligned targets.

    ``embeddings`` is ``[n_samples, len(layers), hidden]`` float32; ``layers``
    are absolute indices (sorted, distinct) into a model of depth ``n_layers``.
    """

    layers: Tuple[int, ...]
    n_layers: int
    embeddings: np.ndarray
    targets: np.ndarray
    pair_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
        object.__setattr__(self, "embeddings", np.asarray(self.embeddings, dtype="<f4"))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype="<f8"))
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))
        if list(self.layers) != sorted(set(self.layers)):
            raise DumpFormatError(f"dump layers must be sorted and distinct, got {list(self.layers)}")
        for layer in self.layers:
            if not 0 <= layer < self.n_layers:
                raise DumpFormatError(f"dump layer {layer} outside a model of depth {self.n_layers}")
        if self.embeddings.ndim != 3 or self.embeddings.shape[1] != len(self.layers):
            raise DumpFormatError(
                f"embeddings shape {self.embeddings.shape} does not match {len(self.layers)} layer(s)"
            )
        n = self.embeddings.shape[0]
        if self.targets.shape != (n,) or len(self.pair_ids) != n:
            raise DumpFormatError("targets and pair ids must align with the embeddings")

    @property
    def n_samples(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.embeddings.shape[2])

    def layer_position(self, layer: int) -> int:
        resolved = resolve_layer(layer, self.n_layers)
        try:
            return self.layers.index(resolved)
        except ValueError:
            raise LayerIndexError(layer, self.n_layers) from None

    def subset(self, indices: np.ndarray) -> "EmbeddingDump":
        return EmbeddingDump(
            self.layers,
            self.n_layers,
            self.embeddings[indices],
            self.targets[indices],
            tuple(self.pair_ids[i] for i in indices),
        )


class DumpStates:
    """Read-only :class:`~layerqe.transformer.LayerStates` over rows of a dump."""

    def __init__(self, dump: EmbeddingDump, indices: np.ndarray, dtype: str = "float32"):
        self._dump = dump
        self._indices = np.asarray(indices, dtype=np.int64)
        self._dtype = dtype

    @property
    def n_layers(self) -> int:
        return self._dump.n_layers

    def final_token_states(self, layer: int) -> Tensor:
        pos = self._dump.layer_position(layer)
        return Tensor(self._dump.embeddings[self._indices, pos, :], dtype=self._dtype)


def encode_dump(dump: EmbeddingDump) -> bytes:
    header = json.dumps(
        {
            "n_samples": dump.n_samples,
            "hidden": dump.hidden,
            "n_layers": dump.n_layers,
            "layers": list(dump.layers),
            "pair_ids": list(dump.pair_ids),
        }
    ).encode("utf-8")
    return b"".join(
        [
            _DUMP_PREFIX.pack(DUMP_MAGIC, DUMP_VERSION, len(header)),
            header,
            np.ascontiguousarray(dump.embeddings, dtype="<f4").tobytes(),
            np.ascontiguousarray(dump.targets, dtype="<f8").tobytes(),
        ]
    )


def decode_dump(data: bytes, source: str = "<bytes>") -> EmbeddingDump:
    if len(data) < _DUMP_PREFIX.size:
        raise DumpTruncatedError(f"{source}: truncated before the dump header")
    magic, version, header_len = _DUMP_PREFIX.unpack_from(data)
    if magic != DUMP_MAGIC:
        raise DumpFormatError(f"{source}: not an embedding dump (bad magic {magic!r})")
    if version != DUMP_VERSION:
        raise DumpFormatError(f"{source}: unsupported dump version {version} (expected {DUMP_VERSION})")
    start = _DUMP_PREFIX.size
    if len(data) < start + header_len:
        raise DumpTruncatedError(f"{source}: truncated inside the dump header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        n, hidden, layers = int(header["n_samples"]), int(header["hidden"]), tuple(header["layers"])
        n_layers, pair_ids = int(header["n_layers"]), tuple(header["pair_ids"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DumpFormatError(f"{source}: corrupt dump header ({exc})") from exc
    payload_len = n * len(layers) * hidden * 4
    expected = start + header_len + payload_len + n * 8
    if len(data) < expected:
        raise DumpTruncatedError(f"{source}: payload truncated ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise DumpFormatError(f"{source}: {len(data) - expected} trailing byte(s) after the payload")
    offset = start + header_len
    embeddings = np.frombuffer(data, dtype="<f4", count=n * len(layers) * hidden, offset=offset)
    targets = np.frombuffer(data, dtype="<f8", count=n, offset=offset + payload_len)
    return EmbeddingDump(layers, n_layers, embeddings.reshape(n, len(layers), hidden).copy(), targets.copy(), pair_ids)


def write_dump(path: Path, dump: EmbeddingDump, *, source_model: str = "unknown") -> Path:
    """Write the binary dump and its ``.json`` sidecar."""
    path = Path(path)
    written = atomic_write_bytes(path, encode_dump(dump))
    atomic_write_json(
        path.with_suffix(path.suffix + ".json"),
        {
            "source_model": source_model,
            "layers": list(dump.layers),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )
    _logger.info("Wrote embedding dump %s (%d samples x %d layers)", written, dump.n_samples, len(dump.layers))
    return written


def read_dump(path: Path) -> EmbeddingDump:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DumpFormatError(f"cannot read dump {path}: {exc}") from exc
    return decode_dump(data, str(path))


def is_dump(path: Path) -> bool:
    try:
        with Path(path).open("rb") as f:
            return f.read(4) == DUMP_MAGIC
    except OSError:
        return False
