from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from openpyxl import load_workbook

from layerqe.errors import ConfigError, DataFormatError
from layerqe.heads import HeadStrategy
from layerqe.report import (
    COMPARE_COLUMNS,
    METRIC_COLUMNS,
    Report,
    RunScores,
    ScoredSet,
    build_best_table,
    build_report,
    compare_table,
    metrics_table,
    read_predictions,
    read_report,
    report_from_sweep,
    write_predictions,
    write_table,
)
from layerqe.stats import WilliamsInput, spearman, williams_test
from layerqe.train import RunOutcome, SweepResult

REFS = np.arange(1.0, 11.0)
NEAR = np.array([2.0, 1.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])  # spearman 0.988
REVERSED = REFS[::-1].copy()  # spearman -1


def _golden_runs() -> list[RunScores]:
    return [
        RunScores("TL(-1)", {"en-de": ScoredSet("en-de", NEAR, REFS), "et-en": ScoredSet("et-en", NEAR, REFS)}),
        RunScores("TL(-7)", {"en-de": ScoredSet("en-de", NEAR, REFS), "et-en": ScoredSet("et-en", REVERSED, REFS)}),
        RunScores("TL(-11)", {"en-de": ScoredSet("en-de", REVERSED, REFS)}),
    ]


class TestBuildReport:
    def test_matches_golden_csv(self, data_dir: Path) -> None:
        report = build_report(_golden_runs(), pairs=("en-de", "et-en"))
        expected = (data_dir / "report_golden.csv").read_text(encoding="utf-8")
        assert report.render_csv() == expected

    def test_tie_goes_to_earlier_row(self) -> None:
        report = build_report(_golden_runs())
        assert report.rows[0].marks["en-de"] == "^"
        assert report.rows[1].marks["en-de"] == "*"

    def test_average_over_defined_cells(self) -> None:
        report = build_report(_golden_runs())
        assert report.rows[1].avg == pytest.approx((0.98787878 - 1.0) / 2, abs=1e-6)
        assert report.rows[2].avg == pytest.approx(-1.0)
        assert report.rows[2].values["et-en"] is None

    def test_significantly_worse_row_gets_no_mark(self) -> None:
        report = build_report(_golden_runs())
        assert report.rows[2].marks.get("en-de", "") == ""
        assert report.rows[1].marks.get("et-en", "") == ""

    def test_constant_predictions_are_na(self) -> None:
        runs = [
            RunScores("flat", {"p": ScoredSet("p", np.ones(10), REFS)}),
            RunScores("ok", {"p": ScoredSet("p", NEAR, REFS)}),
        ]
        report = build_report(runs)
        assert report.rows[0].values["p"] is None
        assert report.rows[0].avg is None
        assert report.rows[1].marks["p"] == "^"
        assert report.rows[1].avg_mark == "†"

    def test_needs_a_pair(self) -> None:
        with pytest.raises(ConfigError):
            build_report([RunScores("empty")])

    def test_scored_set_validation(self) -> None:
        with pytest.raises(ConfigError):
            ScoredSet("p", np.ones(3), np.ones(4))
        with pytest.raises(ConfigError):
            ScoredSet("p", np.ones(1), np.ones(1))


class TestOutputs:
    def test_json_round_trip(self, tmp_path: Path) -> None:
        report = build_report(_golden_runs(), title="layers")
        paths = report.write(tmp_path / "sweep")
        assert [p.name for p in paths] == ["sweep.csv", "sweep.json"]
        loaded = read_report(tmp_path / "sweep.json")
        assert loaded.render_csv() == report.render_csv()
        assert loaded.title == "layers"

    def test_read_report_rejects_junk(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DataFormatError):
            read_report(path)

    def test_workbook_marks(self, tmp_path: Path) -> None:
        report = build_report(_golden_runs())
        path = report.write_xlsx(tmp_path / "sweep.xlsx")
        ws = load_workbook(path)["report"]
        assert [c.value for c in ws[1]] == ["system", "en-de", "et-en", "Avg"]
        assert ws["B2"].font.bold  # best in column
        assert ws["B3"].font.italic  # not significantly worse
        assert not ws["B4"].font.bold and not ws["B4"].font.italic
        assert ws["C4"].value == "NA"
        assert ws["D2"].font.bold  # best average
        assert ws["B2"].value == pytest.approx(0.987879, abs=1e-6)


def test_report_from_sweep_keeps_failed_rows() -> None:
    pair_ids = ("a",) * 10 + ("b",) * 10
    refs = np.concatenate([REFS, REFS])
    good = RunOutcome(HeadStrategy.vanilla(-1), predictions=np.concatenate([NEAR, REFS]))
    failed = RunOutcome(HeadStrategy.vanilla(-30), error="layer -30 out of range")
    sweep = SweepResult([good, failed], ("a", "b"), refs, pair_ids)
    report = report_from_sweep(sweep)
    assert report.render_csv().splitlines() == [
        "system,a,b,Avg",
        "TL(-1),0.988^,1.000^,0.994†",
        "TL(-30),NA,NA,NA",
    ]
    assert report.rows[1].error == "layer -30 out of range"


def test_stub_sweep_grid_is_consistent_with_pairwise_tests() -> None:
    rng = np.random.default_rng(17)
    pairs = tuple(f"p{i}" for i in range(8))
    n = 40
    pair_ids = tuple(p for p in pairs for _ in range(n))
    refs = rng.normal(size=len(pair_ids))
    layers = (-1, -7, -11, -16, -20, -24)
    noise = (0.4, 0.5, 0.6, 1.0, 2.0, 4.0)
    runs = [
        RunOutcome(HeadStrategy.vanilla(layer), predictions=refs + scale * rng.normal(size=refs.size))
        for layer, scale in zip(layers, noise)
    ]
    report = report_from_sweep(SweepResult(runs, pairs, refs, pair_ids))

    lines = report.render_csv().splitlines()
    assert lines[0] == ",".join(["system", *pairs, "Avg"])
    assert [line.split(",")[0] for line in lines[1:]] == [f"TL({x})" for x in layers]
    assert all(len(line.split(",")) == len(pairs) + 2 for line in lines)

    ids = np.asarray(pair_ids)
    for row in report.rows:
        assert row.avg == pytest.approx(np.mean([row.values[p] for p in pairs]), abs=1e-12)
    for pair in pairs:
        sel = ids == pair
        values = [row.values[pair] for row in report.rows]
        best = int(np.argmax(values))
        best_preds = runs[best].predictions[sel]
        for i, row in enumerate(report.rows):
            if i == best:
                assert row.marks[pair] == "^"
                continue
            other = runs[i].predictions[sel]
            w = WilliamsInput(values[best], values[i], spearman(best_preds, other), n)
            expected = "" if williams_test(w).significant(0.05) else "*"
            assert row.marks.get(pair, "") == expected, (pair, row.label)
    marked = [row.label for row in report.rows if row.avg_mark == "†"]
    assert marked == [report.rows[int(np.argmax([row.avg for row in report.rows]))].label]


def test_best_table() -> None:
    one = build_report(_golden_runs())
    other = Report(("en-de", "et-en"), [build_report(_golden_runs()).rows[2]])
    table = build_best_table({"vanilla": one, "dynamic": other})
    assert [r.label for r in table.rows] == ["vanilla", "dynamic"]
    assert table.rows[0].marks == {"en-de": "^", "et-en": "^"}
    assert table.rows[1].values["et-en"] is None


class TestPredictionFiles:
    def _write(self, tmp_path: Path, text: str) -> Path:
        path = tmp_path / "predictions.tsv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_round_trip(self, tmp_path: Path) -> None:
        path = write_predictions(tmp_path / "p.tsv", ["a", "a", "b"], [0.5, 0.25, 1 / 3], [1.0, 2.0, 3.0])
        loaded = read_predictions(path)
        assert loaded.pair_ids == ("a", "a", "b")
        np.testing.assert_array_equal(loaded.indices, [0, 1, 2])
        assert loaded.predictions[2] == 1 / 3

    def test_bad_header(self, tmp_path: Path) -> None:
        path = self._write(tmp_path, "pair\tscore\na\t1\n")
        with pytest.raises(DataFormatError) as exc:
            read_predictions(path)
        assert exc.value.line == 1

    def test_bad_number_reports_line(self, tmp_path: Path) -> None:
        path = self._write(tmp_path, "pair_id\tindex\tprediction\treference\na\t0\t0.5\t1\na\t1\tfive\t2\n")
        with pytest.raises(DataFormatError) as exc:
            read_predictions(path)
        assert exc.value.line == 3

    def test_wrong_field_count(self, tmp_path: Path) -> None:
        path = self._write(tmp_path, "pair_id\tindex\tprediction\treference\na\t0\t0.5\n")
        with pytest.raises(DataFormatError, match=":2:"):
            read_predictions(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(DataFormatError):
            read_predictions(tmp_path / "absent.tsv")

    def test_misaligned_write(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            write_predictions(tmp_path / "p.tsv", ["a"], [0.1, 0.2], [1.0, 2.0])


def _predictions(tmp_path: Path, name: str, preds, pairs=None):
    pairs = pairs or ["x"] * len(preds)
    refs = list(REFS[: len(preds)]) if len(preds) <= 10 else list(np.arange(1.0, len(preds) + 1))
    return read_predictions(write_predictions(tmp_path / name, pairs, preds, refs))


class TestMetricsTable:
    def test_single_pair(self, tmp_path: Path) -> None:
        rows = metrics_table(_predictions(tmp_path, "p.tsv", list(REFS)))
        assert rows == [{"pair_id": "x", "n": 10, "spearman": pytest.approx(1.0), "pearson": pytest.approx(1.0)}]

    def test_pooled_row_and_na(self, tmp_path: Path) -> None:
        preds = _predictions(tmp_path, "p.tsv", [1.0, 1.0, 1.0, 2.0, 3.0], ["a", "a", "a", "b", "b"])
        rows = {r["pair_id"]: r for r in metrics_table(preds)}
        assert rows["a"]["spearman"] is None
        assert rows["b"]["spearman"] == pytest.approx(1.0)
        assert rows["ALL"]["n"] == 5

    def test_write_table(self, tmp_path: Path) -> None:
        rows = metrics_table(_predictions(tmp_path, "p.tsv", list(NEAR)))
        csv_path, json_path = write_table(tmp_path / "metrics", rows, METRIC_COLUMNS)
        assert csv_path.read_text(encoding="utf-8").splitlines() == [
            "pair_id,n,spearman,pearson",
            "x,10,0.987879,0.987879",
        ]
        assert json_path.suffix == ".json"


class TestCompareTable:
    def test_identical_systems(self, tmp_path: Path) -> None:
        a = _predictions(tmp_path, "a.tsv", list(NEAR))
        (row,) = compare_table(a, a)
        assert row["t"] == 0.0
        assert row["verdict"] == "n.s."
        assert set(row) == set(COMPARE_COLUMNS)

    def test_clear_winner(self, tmp_path: Path, rng: np.random.Generator) -> None:
        n = 300
        refs = np.arange(1.0, n + 1)
        good = refs + rng.normal(scale=20.0, size=n)
        poor = refs + rng.normal(scale=200.0, size=n)
        a = _predictions(tmp_path, "a.tsv", list(good))
        b = _predictions(tmp_path, "b.tsv", list(poor))
        assert compare_table(a, b)[0]["verdict"] == "A>B"
        assert compare_table(b, a, two_sided=True)[0]["verdict"] == "B>A"

    def test_one_sided_reports_the_leading_system(self, tmp_path: Path, rng: np.random.Generator) -> None:
        n = 300
        refs = np.arange(1.0, n + 1)
        a = _predictions(tmp_path, "a.tsv", list(refs + rng.normal(scale=200.0, size=n)))
        b = _predictions(tmp_path, "b.tsv", list(refs + rng.normal(scale=20.0, size=n)))
        (row,) = compare_table(a, b)
        assert row["t"] < 0
        assert row["p_value"] < 0.05
        assert row["verdict"] == "B>A"

    def test_undefined_pair_is_na(self, tmp_path: Path) -> None:
        a = _predictions(tmp_path, "a.tsv", [1.0] * 5)
        b = _predictions(tmp_path, "b.tsv", [1.0, 2.0, 3.0, 4.0, 5.0])
        (row,) = compare_table(a, b)
        assert row["verdict"].startswith("NA")
        assert row["t"] is None

    def test_misaligned_files(self, tmp_path: Path) -> None:
        a = _predictions(tmp_path, "a.tsv", list(NEAR))
        b = _predictions(tmp_path, "b.tsv", list(NEAR[:5]))
        with pytest.raises(ConfigError):
            compare_table(a, b)

    def test_alpha_range(self, tmp_path: Path) -> None:
        a = _predictions(tmp_path, "a.tsv", list(NEAR))
        with pytest.raises(ConfigError):
            compare_table(a, a, alpha=1.5)
