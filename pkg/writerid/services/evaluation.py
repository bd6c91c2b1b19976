"""
Evaluation Service.
Top-k accuracy, macro scores, seed aggregation, classification reports and
distribution plots.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib.pyplot as plt
import numpy as np
import structlog
from pydantic import BaseModel, Field
from sklearn.metrics import precision_recall_fscore_support

from ..core.data_model import DatasetManifest
from ..core.errors import DataError, UndefinedMetricError
from ..core.splits import Protocol, primary_writers

logger = structlog.get_logger()

LOSS_EPS = 1e-12
SUMMARY_METRICS = ("top1", "top5", "macro_f1", "macro_precision", "macro_recall", "test_loss")


@dataclass
class PredictionSet:
    """Per-line true class and class probabilities for one evaluated split role."""
    line_ids: List[str]
    true_labels: np.ndarray
    probabilities: np.ndarray
    class_labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.ndim != 2 or self.probabilities.shape[0] != len(self.line_ids):
            raise ValueError("probabilities must be (lines, classes) with one row per line")
        if len(self.true_labels) != len(self.line_ids):
            raise ValueError("one true label per line is required")
        if not self.class_labels:
            self.class_labels = [str(i) for i in range(self.num_classes)]

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    def __len__(self) -> int:
        return len(self.line_ids)

    def ranking(self) -> np.ndarray:
        """Class ids by descending probability; ties go to the lower class id."""
        return np.argsort(-self.probabilities, axis=1, kind="stable")

    def top1(self) -> np.ndarray:
        return self.ranking()[:, 0]


class ClassScores(BaseModel):
    label: str
    precision: float
    recall: float
    f1: float
    support: int


class RunReport(BaseModel):
    """Test metrics of a single run."""
    top1: float
    top5: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    test_loss: float
    per_class: List[ClassScores] = Field(default_factory=list)

    @property
    def class_labels(self) -> List[str]:
        return [c.label for c in self.per_class]

    @property
    def support(self) -> int:
        return sum(c.support for c in self.per_class)


class MeanStd(BaseModel):
    mean: float = 0.0
    std: float = 0.0

    def cell(self, decimals: int = 4) -> str:
        return f"{self.mean:.{decimals}f} ({self.std:.{decimals}f})"


class ClassAggregate(BaseModel):
    label: str
    precision: MeanStd
    recall: MeanStd
    f1: MeanStd
    support: MeanStd


class AggregateReport(BaseModel):
    """Mean and population std over seed runs."""
    runs: int
    metrics: Dict[str, MeanStd]
    per_class: List[ClassAggregate]
    macro_avg: ClassAggregate
    weighted_avg: ClassAggregate


def _require_lines(p: PredictionSet) -> None:
    if len(p) == 0:
        raise UndefinedMetricError("metric is undefined on an empty prediction set")


def top_k_accuracy(p: PredictionSet, k: int) -> float:
    """Fraction of lines whose true class is among the k highest-ranked classes."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    _require_lines(p)
    top = p.ranking()[:, :k]
    return float(np.mean(np.any(top == p.true_labels[:, None], axis=1)))


def per_class_scores(p: PredictionSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, f1, support) per class id; undefined ratios score 0."""
    _require_lines(p)
    return precision_recall_fscore_support(
        p.true_labels, p.top1(), labels=list(range(p.num_classes)), average=None, zero_division=0
    )


def macro_f1(p: PredictionSet) -> float:
    """Unweighted mean of per-class F1 over all classes."""
    return float(np.mean(per_class_scores(p)[2]))


def mean_cross_entropy(p: PredictionSet) -> float:
    _require_lines(p)
    true_probs = p.probabilities[np.arange(len(p)), p.true_labels]
    return float(np.mean(-np.log(np.clip(true_probs, LOSS_EPS, 1.0))))


def evaluate_predictions(p: PredictionSet) -> RunReport:
    precision, recall, f1, support = per_class_scores(p)
    total = support.sum()
    weights = support / total
    return RunReport(
        top1=top_k_accuracy(p, 1),
        top5=top_k_accuracy(p, min(5, p.num_classes)),
        macro_f1=float(np.mean(f1)),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        weighted_precision=float(np.sum(precision * weights)),
        weighted_recall=float(np.sum(recall * weights)),
        weighted_f1=float(np.sum(f1 * weights)),
        test_loss=mean_cross_entropy(p),
        per_class=[
            ClassScores(label=label, precision=float(pr), recall=float(rc), f1=float(f), support=int(s))
            for label, pr, rc, f, s in zip(p.class_labels, precision, recall, f1, support)
        ],
    )


def mean_std(values: Sequence[float]) -> MeanStd:
    """Mean and population (denominator N) standard deviation."""
    array = np.asarray(values, dtype=np.float64)
    return MeanStd(mean=float(array.mean()), std=float(array.std(ddof=0)))


def aggregate_runs(reports: Sequence[RunReport]) -> AggregateReport:
    if not reports:
        raise ValueError("at least one run report is required")
    labels = reports[0].class_labels
    if any(r.class_labels != labels for r in reports[1:]):
        raise ValueError("run reports cover different class lists")

    def across(getter) -> MeanStd:
        return mean_std([getter(r) for r in reports])

    per_class = [
        ClassAggregate(
            label=label,
            precision=across(lambda r, i=i: r.per_class[i].precision),
            recall=across(lambda r, i=i: r.per_class[i].recall),
            f1=across(lambda r, i=i: r.per_class[i].f1),
            support=across(lambda r, i=i: r.per_class[i].support),
        )
        for i, label in enumerate(labels)
    ]
    support = across(lambda r: r.support)
    return AggregateReport(
        runs=len(reports),
        metrics={name: across(lambda r, name=name: getattr(r, name)) for name in SUMMARY_METRICS},
        per_class=per_class,
        macro_avg=ClassAggregate(
            label="macro avg",
            precision=across(lambda r: r.macro_precision),
            recall=across(lambda r: r.macro_recall),
            f1=across(lambda r: r.macro_f1),
            support=support,
        ),
        weighted_avg=ClassAggregate(
            label="weighted avg",
            precision=across(lambda r: r.weighted_precision),
            recall=across(lambda r: r.weighted_recall),
            f1=across(lambda r: r.weighted_f1),
            support=support,
        ),
    )


def _support_cell(value: MeanStd) -> str:
    return f"{value.mean:.1f} ({value.std:.1f})"


def report_rows(agg: AggregateReport) -> List[List[str]]:
    """Rows of the classification report: classes, accuracy, macro avg, weighted avg."""
    rows = [[c.label, c.precision.cell(), c.recall.cell(), c.f1.cell(), _support_cell(c.support)] for c in agg.per_class]
    accuracy = agg.metrics["top1"].cell()
    rows.append(["accuracy", accuracy, accuracy, accuracy, _support_cell(agg.macro_avg.support)])
    for avg in (agg.macro_avg, agg.weighted_avg):
        rows.append([avg.label, avg.precision.cell(), avg.recall.cell(), avg.f1.cell(), _support_cell(avg.support)])
    return rows


REPORT_HEADER = ["class", "precision", "recall", "f1-score", "support"]


def classification_report(agg: AggregateReport) -> str:
    """Aligned text table with `mean (std)` cells."""
    rows = [REPORT_HEADER] + report_rows(agg)
    widths = [max(len(row[i]) for row in rows) for i in range(len(REPORT_HEADER))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0 or n == len(agg.per_class):
            lines.append("")
    return "\n".join(lines) + "\n"


def write_report_csv(agg: AggregateReport, path: Path) -> Path:
    """Machine-readable report: one row per class/summary with mean and std columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "precision_mean", "precision_std", "recall_mean", "recall_std",
                         "f1_mean", "f1_std", "support_mean", "support_std"])
        for c in [*agg.per_class, agg.macro_avg, agg.weighted_avg]:
            writer.writerow([c.label, c.precision.mean, c.precision.std, c.recall.mean, c.recall.std,
                             c.f1.mean, c.f1.std, c.support.mean, c.support.std])
        for name, value in agg.metrics.items():
            writer.writerow([name, "", "", "", "", value.mean, value.std, "", ""])
    return path


def write_predictions_csv(p: PredictionSet, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["line_id", "true_index", *p.class_labels])
        for line_id, label, probs in zip(p.line_ids, p.true_labels, p.probabilities):
            writer.writerow([line_id, int(label), *(repr(float(v)) for v in probs)])
    return path


def read_predictions_csv(path: Path) -> PredictionSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["line_id", "true_index"]:
            raise DataError(f"{path} is not a predictions file")
        rows = list(reader)
    labels = header[2:]
    probabilities = np.array([[float(v) for v in row[2:]] for row in rows], dtype=np.float64).reshape(len(rows), len(labels))
    return PredictionSet(
        line_ids=[row[0] for row in rows],
        true_labels=np.array([int(row[1]) for row in rows], dtype=np.int64),
        probabilities=probabilities,
        class_labels=labels,
    )


def distribution_counts(m: DatasetManifest, protocol: Protocol, min_pages: int = 3) -> List[Tuple[str, int]]:
    """
    Per-writer counts behind the distribution charts, sorted descending.

    Protocol A counts labeled lines per writer; Protocol B counts pages per
    writer among writers eligible for the page-disjoint split.
    """
    protocol = Protocol(protocol)
    counts: Dict[str, int] = {}
    if protocol == Protocol.LINE_LEVEL:
        for line in m.lines:
            if line.writer is not None:
                counts[line.writer.label] = counts.get(line.writer.label, 0) + 1
    else:
        labels = {c.key: c.label for c in m.classes}
        for writer_key in primary_writers(m).values():
            counts[labels[writer_key]] = counts.get(labels[writer_key], 0) + 1
        counts = {label: n for label, n in counts.items() if n >= min_pages}
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def emit_distribution_plots(m: DatasetManifest, out_dir: Path, protocols: Sequence[Protocol] = tuple(Protocol)) -> List[Path]:
    """Bar charts of the per-writer distributions, one PNG per protocol."""
    plt.switch_backend("Agg")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for protocol in protocols:
        protocol = Protocol(protocol)
        counts = distribution_counts(m, protocol)
        unit = "lines" if protocol == Protocol.LINE_LEVEL else "pages"
        fig, ax = plt.subplots(figsize=(max(6.0, 0.12 * len(counts)), 4.0))
        ax.bar(range(len(counts)), [n for _, n in counts], color="#4c72b0")
        ax.set_xlabel("writer (sorted by count)")
        ax.set_ylabel(unit)
        ax.set_title(f"Protocol {protocol.value}: {unit} per writer ({len(counts)} writers)")
        if 0 < len(counts) <= 40:
            ax.set_xticks(range(len(counts)))
            ax.set_xticklabels([label for label, _ in counts], rotation=90, fontsize=6)
        else:
            ax.set_xticks([])
        fig.tight_layout()
        path = out_dir / f"distribution_protocol_{protocol.value}_{unit}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
        logger.info("distribution_plot_written", protocol=protocol.value, writers=len(counts), path=str(path))
    return written


def summary_line(report: RunReport) -> str:
    return " ".join(f"{name}={getattr(report, name):.4f}" for name in SUMMARY_METRICS if not math.isnan(getattr(report, name)))
