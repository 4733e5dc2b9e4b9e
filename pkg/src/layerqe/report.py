"""Result tables: layer/strategy grids, per-pair metrics and significance comparisons.

Grid cells carry three marks:

* ``^`` the best score in its column (bold in the workbook);
* ``*`` not significantly worse than the column best (Williams test);
* ``†`` on the Avg cell of the row with the highest average.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from openpyxl import Workbook
from openpyxl.styles import Font
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

from layerqe.artifacts import atomic_write, atomic_write_json, atomic_write_text
from layerqe.errors import ConfigError, DataFormatError, UndefinedCorrelationError
from layerqe.stats import WilliamsInput, WilliamsResult, compare_predictions, pearson, spearman, williams_test
from layerqe.train import SweepResult

_logger = logging.getLogger(__name__)

BEST_MARK = "^"
TIED_MARK = "*"
BEST_AVG_MARK = "†"
NA = "NA"
AVG_COLUMN = "Avg"
PREDICTION_COLUMNS = ("pair_id", "index", "prediction", "reference")
REPORT_SHEET_NAME = "report"


@dataclass(frozen=True)
class ScoredSet:
    pair_id: str
    predictions: np.ndarray
    references: np.ndarray

    def __post_init__(self) -> None:
        preds = np.asarray(self.predictions, dtype=np.float64)
        refs = np.asarray(self.references, dtype=np.float64)
        if preds.shape != refs.shape or preds.ndim != 1:
            raise ConfigError(f"{self.pair_id}: {preds.size} prediction(s) for {refs.size} reference(s)")
        if preds.size < 2:
            raise ConfigError(f"{self.pair_id}: a scored set needs at least two items")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "references", refs)

    @property
    def n(self) -> int:
        return int(self.predictions.size)


@dataclass
class RunScores:
    """One table row before scoring: a label and its scored sets per pair."""

    label: str
    sets: Dict[str, ScoredSet] = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class ReportRow:
    label: str
    values: Dict[str, Optional[float]]
    avg: Optional[float] = None
    marks: Dict[str, str] = field(default_factory=dict)
    avg_mark: str = ""
    error: Optional[str] = None


@dataclass
class Report:
    pairs: Tuple[str, ...]
    rows: List[ReportRow]
    alpha: float = 0.05
    two_sided: bool = False
    title: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "title": self.title,
            "alpha": self.alpha,
            "two_sided": self.two_sided,
            "pairs": list(self.pairs),
            "rows": [
                {
                    "label": r.label,
                    "values": {p: r.values.get(p) for p in self.pairs},
                    "avg": r.avg,
                    "marks": {p: r.marks.get(p, "") for p in self.pairs},
                    "avg_mark": r.avg_mark,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Report":
        rows = [
            ReportRow(
                r["label"],
                dict(r["values"]),
                r.get("avg"),
                dict(r.get("marks", {})),
                r.get("avg_mark", ""),
                r.get("error"),
            )
            for r in data["rows"]
        ]
        return cls(
            tuple(data["pairs"]),
            rows,
            float(data.get("alpha", 0.05)),
            bool(data.get("two_sided", False)),
            data.get("title", ""),
        )

    def render_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["system", *self.pairs, AVG_COLUMN])
        for row in self.rows:
            cells = [_cell(row.values.get(p), row.marks.get(p, "")) for p in self.pairs]
            writer.writerow([row.label, *cells, _cell(row.avg, row.avg_mark)])
        return buf.getvalue()

    def write_csv(self, path: Path) -> Path:
        return atomic_write_text(Path(path), self.render_csv())

    def write_json(self, path: Path) -> Path:
        return atomic_write_json(Path(path), self.to_dict())

    def write_xlsx(self, path: Path) -> Path:
        return atomic_write(Path(path), _workbook(self).save, suffix=".tmp.xlsx")

    def write(self, stem: Path, *, xlsx: bool = False) -> List[Path]:
        """Write ``stem.csv`` and ``stem.json`` (and ``stem.xlsx``)."""
        stem = Path(stem)
        written = [self.write_csv(stem.with_suffix(".csv")), self.write_json(stem.with_suffix(".json"))]
        if xlsx:
            written.append(self.write_xlsx(stem.with_suffix(".xlsx")))
        for p in written:
            _logger.info("Wrote %s", p)
        return written


def _cell(value: Optional[float], mark: str) -> str:
    return NA if value is None else f"{value:.3f}{mark}"


def _row_average(values: Mapping[str, Optional[float]]) -> Optional[float]:
    defined = [v for v in values.values() if v is not None]
    return float(np.mean(defined)) if defined else None


def _score(s: ScoredSet) -> Optional[float]:
    try:
        return spearman(s.predictions, s.references)
    except UndefinedCorrelationError:
        return None


def _not_worse(best: ScoredSet, other: ScoredSet, *, alpha: float, two_sided: bool) -> bool:
    """True when the best row's lead over ``other`` is not significant."""
    try:
        r12 = spearman(best.predictions, best.references)
        r13 = spearman(other.predictions, other.references)
        if np.array_equal(best.predictions, other.predictions):
            r23 = 1.0
        else:
            r23 = spearman(best.predictions, other.predictions)
        result = williams_test(WilliamsInput(r12, r13, r23, best.n), two_sided=two_sided)
    except (UndefinedCorrelationError, ConfigError) as exc:
        _logger.debug("no significance mark for %s: %s", other.pair_id, exc)
        return False
    return not result.significant(alpha)


def build_report(
    runs: Sequence[RunScores],
    *,
    alpha: float = 0.05,
    two_sided: bool = False,
    pairs: Optional[Sequence[str]] = None,
    title: str = "",
) -> Report:
    """Score every run per pair and mark the grid.

    Columns follow ``pairs`` (default: first-seen order across runs). On a tie
    for column best the earlier row wins.
    """
    if pairs is None:
        pairs = list(dict.fromkeys(p for run in runs for p in run.sets))
    if not pairs:
        raise ConfigError("a report needs at least one language pair")
    rows = [
        ReportRow(run.label, {p: (_score(run.sets[p]) if p in run.sets else None) for p in pairs}, error=run.error)
        for run in runs
    ]
    for row in rows:
        row.avg = _row_average(row.values)

    for pair in pairs:
        best_i: Optional[int] = None
        for i, row in enumerate(rows):
            v = row.values[pair]
            if v is not None and (best_i is None or v > rows[best_i].values[pair]):
                best_i = i
        if best_i is None:
            continue
        rows[best_i].marks[pair] = BEST_MARK
        best_set = runs[best_i].sets[pair]
        for i, row in enumerate(rows):
            if i == best_i or row.values[pair] is None:
                continue
            if _not_worse(best_set, runs[i].sets[pair], alpha=alpha, two_sided=two_sided):
                row.marks[pair] = TIED_MARK

    averaged = [i for i, r in enumerate(rows) if r.avg is not None]
    if averaged:
        top = max(averaged, key=lambda i: (rows[i].avg, -i))
        rows[top].avg_mark = BEST_AVG_MARK
    return Report(tuple(pairs), rows, alpha, two_sided, title)


def report_from_sweep(result: SweepResult, *, alpha: float = 0.05, two_sided: bool = False, title: str = "") -> Report:
    ids = np.asarray(result.pair_ids)
    runs: List[RunScores] = []
    for run in result.runs:
        scores = RunScores(run.label, error=run.error)
        if run.predictions is not None:
            for pair in result.pairs:
                sel = ids == pair
                if sel.sum() >= 2:
                    scores.sets[pair] = ScoredSet(pair, run.predictions[sel], result.references[sel])
        runs.append(scores)
    return build_report(runs, alpha=alpha, two_sided=two_sided, pairs=result.pairs, title=title)


def build_best_table(reports: Mapping[str, Report]) -> Report:
    """Best score per pair from each report, one row per report (no significance marks)."""
    if not reports:
        raise ConfigError("no reports to compare")
    pairs = tuple(dict.fromkeys(p for rep in reports.values() for p in rep.pairs))
    rows: List[ReportRow] = []
    for name, rep in reports.items():
        values: Dict[str, Optional[float]] = {}
        for pair in pairs:
            scored = [r.values.get(pair) for r in rep.rows if r.values.get(pair) is not None]
            values[pair] = max(scored) if scored else None
        rows.append(ReportRow(name, values, _row_average(values)))
    for pair in pairs:
        candidates = [i for i, r in enumerate(rows) if r.values[pair] is not None]
        if candidates:
            rows[max(candidates, key=lambda i: (rows[i].values[pair], -i))].marks[pair] = BEST_MARK
    averaged = [i for i, r in enumerate(rows) if r.avg is not None]
    if averaged:
        rows[max(averaged, key=lambda i: (rows[i].avg, -i))].avg_mark = BEST_AVG_MARK
    return Report(pairs, rows, title="best per method")


def read_report(path: Path) -> Report:
    try:
        return Report.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"cannot read report: {exc}", path=path) from exc


# -- workbook ---------------------------------------------------------------------


def _style_header(ws: Worksheet, n_columns: int) -> None:
    font = Font(bold=True)
    for col in range(1, n_columns + 1):
        ws.cell(row=1, column=col).font = font
    ws.freeze_panes = "B2"


def _autosize_columns(ws: Worksheet, max_width: int = 40) -> None:
    for col in range(1, ws.max_column + 1):
        width = max(len(str(ws.cell(row=r, column=col).value or "")) for r in range(1, ws.max_row + 1))
        ws.column_dimensions[get_column_letter(col)].width = min(width + 2, max_width)


def _workbook(report: Report) -> Workbook:
    wb = Workbook()
    ws = wb.active
    ws.title = REPORT_SHEET_NAME
    header = ["system", *report.pairs, AVG_COLUMN]
    for col, name in enumerate(header, start=1):
        ws.cell(row=1, column=col, value=name)
    _style_header(ws, len(header))
    for r, row in enumerate(report.rows, start=2):
        ws.cell(row=r, column=1, value=row.label)
        cells = [(row.values.get(p), row.marks.get(p, "")) for p in report.pairs] + [(row.avg, row.avg_mark)]
        for c, (value, mark) in enumerate(cells, start=2):
            cell = ws.cell(row=r, column=c, value=NA if value is None else round(value, 6))
            if value is None:
                continue
            cell.number_format = "0.000"
            if mark in (BEST_MARK, BEST_AVG_MARK):
                cell.font = Font(bold=True)
            elif mark == TIED_MARK:
                cell.font = Font(italic=True)
    _autosize_columns(ws)
    notes = wb.create_sheet("notes")
    notes.append(["mark", "meaning"])
    notes.append(["bold", "best in column (best average in the Avg column)"])
    notes.append(["italic", f"not significantly worse than the column best (Williams, alpha={report.alpha})"])
    return wb


# -- prediction files ------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    pair_ids: Tuple[str, ...]
    indices: np.ndarray
    predictions: np.ndarray
    references: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_ids)

    def pairs(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(self.pair_ids))

    def select(self, pair: str) -> Tuple[np.ndarray, np.ndarray]:
        sel = np.asarray(self.pair_ids) == pair
        return self.predictions[sel], self.references[sel]

    def with_references(self, references: Sequence[float]) -> "PredictionSet":
        refs = np.asarray(references, dtype=np.float64)
        if refs.shape != self.references.shape:
            raise ConfigError(f"{refs.size} reference(s) for {len(self)} prediction(s)")
        return PredictionSet(self.pair_ids, self.indices, self.predictions, refs)


def write_predictions(
    path: Path, pair_ids: Sequence[str], predictions: Sequence[float], references: Sequence[float]
) -> Path:
    if not len(pair_ids) == len(predictions) == len(references):
        raise ConfigError("pair ids, predictions and references must align")
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for i, (pair, pred, ref) in enumerate(zip(pair_ids, predictions, references)):
        writer.writerow([pair, i, repr(float(pred)), repr(float(ref))])
    return atomic_write_text(Path(path), buf.getvalue())


def read_predictions(path: Path) -> PredictionSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read predictions: {exc}", path=path) from exc
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != PREDICTION_COLUMNS:
        raise DataFormatError(f"header must be {list(PREDICTION_COLUMNS)}", path=path, line=1)
    pairs: List[str] = []
    indices: List[int] = []
    preds: List[float] = []
    refs: List[float] = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(PREDICTION_COLUMNS):
            raise DataFormatError(
                f"expected {len(PREDICTION_COLUMNS)} fields, found {len(row)}", path=path, line=line_no
            )
        try:
            indices.append(int(row[1]))
            preds.append(float(row[2]))
            refs.append(float(row[3]))
        except ValueError as exc:
            raise DataFormatError(f"bad number: {exc}", path=path, line=line_no) from None
        pairs.append(row[0])
    return PredictionSet(tuple(pairs), np.asarray(indices, dtype=np.int64), np.asarray(preds), np.asarray(refs))


# -- metrics and comparisons --------------------------------------------------------------

METRIC_COLUMNS = ("pair_id", "n", "spearman", "pearson")
COMPARE_COLUMNS = ("pair_id", "n", "spearman_a", "spearman_b", "t", "p_value", "df", "verdict")
ALL_PAIRS = "ALL"


def _maybe(fn, *args: Any) -> Optional[float]:
    try:
        return fn(*args)
    except UndefinedCorrelationError:
        return None


def metrics_table(predictions: PredictionSet) -> List[Dict[str, Any]]:
    """Spearman and Pearson per pair, plus a pooled ``ALL`` row when there are several pairs."""
    rows: List[Dict[str, Any]] = []
    groups = [(p, *predictions.select(p)) for p in predictions.pairs()]
    if len(groups) > 1:
        groups.append((ALL_PAIRS, predictions.predictions, predictions.references))
    for pair, preds, refs in groups:
        if preds.size < 2:
            rows.append({"pair_id": pair, "n": int(preds.size), "spearman": None, "pearson": None})
            continue
        rows.append(
            {
                "pair_id": pair,
                "n": int(preds.size),
                "spearman": _maybe(spearman, preds, refs),
                "pearson": _maybe(pearson, preds, refs),
            }
        )
    return rows


def _check_aligned(a: PredictionSet, b: PredictionSet) -> None:
    if len(a) != len(b):
        raise ConfigError(f"prediction files differ in length ({len(a)} vs {len(b)})")
    if a.pair_ids != b.pair_ids or not np.array_equal(a.indices, b.indices):
        raise ConfigError("prediction files list different items (pair_id/index columns differ)")
    if not np.array_equal(a.references, b.references):
        raise ConfigError("prediction files disagree on the reference scores")


def compare_table(
    a: PredictionSet, b: PredictionSet, *, alpha: float = 0.05, two_sided: bool = False
) -> List[Dict[str, Any]]:
    """Williams test between systems A and B for every pair; one-sided tests favour the leader."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    _check_aligned(a, b)
    rows: List[Dict[str, Any]] = []
    for pair in a.pairs():
        pa, refs = a.select(pair)
        pb, _ = b.select(pair)
        row: Dict[str, Any] = {"pair_id": pair, "n": int(pa.size)}
        try:
            r_a, r_b, result = compare_predictions(pa, pb, refs, two_sided=two_sided)
            if not two_sided and result.t < 0:
                # one-sided: test whichever system leads
                _, _, reverse = compare_predictions(pb, pa, refs)
                result = WilliamsResult(result.t, reverse.p_value, result.df)
        except (UndefinedCorrelationError, ConfigError) as exc:
            row.update({c: None for c in COMPARE_COLUMNS[2:-1]})
            row["verdict"] = f"{NA} ({exc})"
            rows.append(row)
            continue
        if result.significant(alpha):
            verdict = "A>B" if result.t > 0 else "B>A"
        else:
            verdict = "n.s."
        row.update(
            {
                "spearman_a": r_a,
                "spearman_b": r_b,
                "t": result.t,
                "p_value": result.p_value,
                "df": result.df,
                "verdict": verdict,
            }
        )
        rows.append(row)
    return rows


def _fmt(value: Any) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_table(stem: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> List[Path]:
    """Write ``stem.csv`` (fixed precision) and ``stem.json`` (full precision)."""
    stem = Path(stem)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return [
        atomic_write_text(stem.with_suffix(".csv"), buf.getvalue()),
        atomic_write_json(stem.with_suffix(".json"), {"rows": list(rows)}),
    ]
