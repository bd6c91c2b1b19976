"""
Test Evaluation Service
Validates top-k accuracy, macro scores, seed aggregation, reports and distribution plots.
"""

import numpy as np
import pytest

from writerid.core.data_model import LineRecord, WriterClass, finalize_manifest
from writerid.core.errors import UndefinedMetricError
from writerid.core.splits import Protocol
from writerid.services.evaluation import (
    PredictionSet,
    aggregate_runs,
    classification_report,
    distribution_counts,
    emit_distribution_plots,
    evaluate_predictions,
    macro_f1,
    mean_std,
    per_class_scores,
    read_predictions_csv,
    report_rows,
    summary_line,
    top_k_accuracy,
    write_predictions_csv,
    write_report_csv,
)


def from_predictions(true, predicted, num_classes):
    """Prediction set whose top-1 class is `predicted`."""
    probs = np.full((len(true), num_classes), 0.1 / max(num_classes - 1, 1))
    probs[np.arange(len(true)), predicted] = 0.9
    return PredictionSet(line_ids=[f"l{i}" for i in range(len(true))], true_labels=true, probabilities=probs)


def brute_force_scores(true, predicted, num_classes):
    precision, recall, f1 = [], [], []
    for c in range(num_classes):
        tp = sum(1 for t, p in zip(true, predicted) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, predicted) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, predicted) if t == c and p != c)
        precision.append(tp / (tp + fp) if tp + fp else 0.0)
        recall.append(tp / (tp + fn) if tp + fn else 0.0)
        f1.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return np.array(precision), np.array(recall), np.array(f1)


def manifest_with_counts(lines_per_writer):
    lines = []
    for name, count in lines_per_writer.items():
        for n in range(count):
            page = f"{name}_p{n}"
            lines.append(LineRecord(line_id=f"{page}_l0", page_id=page, image_ref=f"{page}.png",
                                    writer=WriterClass.parse(name)))
    return finalize_manifest(lines)


class TestTopK:
    """Test ranking and top-k accuracy."""

    def setup_method(self):
        probs = np.zeros((3, 8))
        ranked = np.linspace(0.3, 0.01, 8)
        for row, true_rank in enumerate((1, 2, 7)):
            order = [c for c in range(8) if c != row]
            order.insert(true_rank - 1, row)
            probs[row, order] = ranked
        self.predictions = PredictionSet(line_ids=["a", "b", "c"], true_labels=[0, 1, 2], probabilities=probs)

    def test_rank_examples(self):
        assert top_k_accuracy(self.predictions, 1) == pytest.approx(1 / 3)
        assert top_k_accuracy(self.predictions, 5) == pytest.approx(2 / 3)
        assert top_k_accuracy(self.predictions, 8) == 1.0

    def test_monotone_in_k(self):
        values = [top_k_accuracy(self.predictions, k) for k in range(1, 9)]
        assert values == sorted(values)

    def test_ties_go_to_lower_class(self):
        p = PredictionSet(line_ids=["a"], true_labels=[2], probabilities=np.full((1, 4), 0.25))
        assert p.ranking().tolist() == [[0, 1, 2, 3]]
        assert top_k_accuracy(p, 2) == 0.0
        assert top_k_accuracy(p, 3) == 1.0

    def test_argument_errors(self):
        with pytest.raises(ValueError):
            top_k_accuracy(self.predictions, 0)
        empty = PredictionSet(line_ids=[], true_labels=[], probabilities=np.zeros((0, 3)))
        with pytest.raises(UndefinedMetricError):
            top_k_accuracy(empty, 1)
        with pytest.raises(UndefinedMetricError):
            macro_f1(empty)


class TestMacroScores:
    """Test per-class and macro scores."""

    def test_two_class_fixture(self):
        p = from_predictions([0, 0, 1, 1], [0, 1, 1, 1], 2)
        precision, recall, f1, support = per_class_scores(p)
        assert f1.tolist() == pytest.approx([2 / 3, 4 / 5])
        assert macro_f1(p) == pytest.approx(0.7333, abs=1e-4)
        assert support.tolist() == [2, 2]

    def test_extremes(self):
        assert macro_f1(from_predictions([0, 1, 2], [0, 1, 2], 3)) == 1.0
        assert macro_f1(from_predictions([0, 1, 2], [1, 2, 0], 3)) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            num_classes = int(rng.integers(2, 8))
            lines = int(rng.integers(1, 200))
            true = rng.integers(0, num_classes, size=lines)
            predicted = rng.integers(0, num_classes, size=lines)
            report = evaluate_predictions(from_predictions(true, predicted, num_classes))
            precision, recall, f1 = brute_force_scores(true.tolist(), predicted.tolist(), num_classes)
            assert abs(report.macro_f1 - f1.mean()) <= 1e-12
            assert abs(report.macro_precision - precision.mean()) <= 1e-12
            assert abs(report.macro_recall - recall.mean()) <= 1e-12

    def test_weighted_equals_macro_for_balanced_support(self):
        report = evaluate_predictions(from_predictions([0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 2, 0], 3))
        assert report.weighted_f1 == pytest.approx(report.macro_f1)

    def test_loss(self):
        p = PredictionSet(line_ids=["a"], true_labels=[0], probabilities=[[0.7, 0.2, 0.1]])
        assert evaluate_predictions(p).test_loss == pytest.approx(0.35667, abs=1e-5)

    def test_certain_predictions_have_zero_loss(self):
        p = PredictionSet(line_ids=["a", "b"], true_labels=[0, 1], probabilities=[[1.0, 0.0], [0.0, 1.0]])
        report = evaluate_predictions(p)
        assert report.test_loss >= 0.0
        assert report.test_loss == 0.0


class TestAggregation:
    """Test aggregation over seed runs."""

    def test_population_std(self):
        value = mean_std([0.98, 0.99, 1.00])
        assert value.mean == pytest.approx(0.99)
        assert value.std == pytest.approx(0.008165, abs=1e-6)
        assert mean_std([0.5]).std == 0.0

    def test_perfect_run_report(self):
        report = evaluate_predictions(from_predictions([0, 1, 1], [0, 1, 1], 2))
        agg = aggregate_runs([report])
        rows = report_rows(agg)
        assert [r[0] for r in rows] == ["0", "1", "accuracy", "macro avg", "weighted avg"]
        assert rows[2][1] == "1.0000 (0.0000)"
        assert rows[-1][4] == "3.0 (0.0)"
        text = classification_report(agg)
        assert text.splitlines()[0].split() == ["class", "precision", "recall", "f1-score", "support"]

    def test_runs_over_different_classes_rejected(self):
        a = evaluate_predictions(from_predictions([0, 1], [0, 1], 2))
        b = evaluate_predictions(from_predictions([0, 1, 2], [0, 1, 2], 3))
        with pytest.raises(ValueError):
            aggregate_runs([a, b])
        with pytest.raises(ValueError):
            aggregate_runs([])

    def test_report_files(self, tmp_path):
        reports = [evaluate_predictions(from_predictions([0, 1, 1, 0], pred, 2)) for pred in ([0, 1, 1, 0], [0, 1, 0, 0])]
        agg = aggregate_runs(reports)
        assert agg.metrics["top1"].mean == pytest.approx(0.875)
        lines = write_report_csv(agg, tmp_path / "report.csv").read_text().splitlines()
        assert lines[0].startswith("row,precision_mean,precision_std")
        assert "top1=" in summary_line(reports[0])

    def test_predictions_file(self, tmp_path):
        p = PredictionSet(line_ids=["x", "y"], true_labels=[1, 0], probabilities=[[0.25, 0.75], [0.5, 0.5]],
                          class_labels=["Ameen", "Botros"])
        loaded = read_predictions_csv(write_predictions_csv(p, tmp_path / "predictions.csv"))
        assert loaded.line_ids == ["x", "y"]
        assert loaded.class_labels == ["Ameen", "Botros"]
        assert np.array_equal(loaded.probabilities, p.probabilities)


class TestDistributionPlots:
    """Test per-writer distribution charts."""

    def test_counts_sorted_descending(self):
        m = manifest_with_counts({"c": 1, "a": 5, "b": 3})
        assert distribution_counts(m, Protocol.LINE_LEVEL) == [("a", 5), ("b", 3), ("c", 1)]
        assert distribution_counts(m, Protocol.PAGE_DISJOINT) == [("a", 5), ("b", 3)]

    def test_png_files_written(self, tmp_path):
        paths = emit_distribution_plots(manifest_with_counts({"a": 5, "b": 3, "c": 1}), tmp_path)
        assert [p.name for p in paths] == [
            "distribution_protocol_A_lines.png",
            "distribution_protocol_B_pages.png",
        ]
        assert all(p.stat().st_size > 0 for p in paths)

    def test_empty_manifest(self, tmp_path):
        paths = emit_distribution_plots(finalize_manifest([]), tmp_path)
        assert len(paths) == 2
