"""Per-class metrics, the None-aware confusion matrix and the freeze sweep.

Accuracy is reported but never headlined: with the corpus imbalance at
hand it says little, so precision/recall/F1/AP per class plus their
unweighted means are the primary numbers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .classes import CLASS_CODES, N_CLASSES, NONE_LABEL, by_code

log = logging.getLogger(__name__)


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 from raw counts; a zero denominator yields
    zero by convention."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def average_precision(scores: Sequence[float], truths: Sequence[int]) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k that hold a
    positive. Ranking is by descending score with ties kept in input order
    (stable sort)."""
    if len(scores) != len(truths):
        raise ValueError("scores and truths must have equal length")
    n_pos = int(sum(truths))
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = np.asarray(truths, dtype=np.int64)[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_k = cum_pos / ranks
    return float(precision_at_k[ranked == 1].mean())


@dataclass
class MetricsReport:
    per_class: dict[str, dict[str, Any]]
    means: dict[str, float]
    threshold: float
    accuracy: float  # auxiliary only
    flagged: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"per_class": self.per_class, "means": self.means,
                "threshold": self.threshold, "accuracy": self.accuracy,
                "flagged": self.flagged}


@dataclass
class ConfusionMatrix:
    """Counts over ground truth (rows) x predictions (columns), both sides
    extended with a None bucket. Emitted in both normalizations because the
    two conventions disagree in the wild; columns of by_column sum to 1
    unless the column is empty and flagged."""

    labels: list[str]
    counts: np.ndarray
    by_column: np.ndarray
    by_row: np.ndarray
    empty_columns: list[str] = field(default_factory=list)
    empty_rows: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"labels": self.labels,
                "counts": self.counts.tolist(),
                "by_column": self.by_column.tolist(),
                "by_row": self.by_row.tolist(),
                "empty_columns": self.empty_columns,
                "empty_rows": self.empty_rows}


def confusion(predicted: Mapping[str, str | None],
              truths: Mapping[str, str | None]) -> ConfusionMatrix:
    """Build the None-aware confusion matrix over records present in both
    mappings. Values are class codes or None."""
    labels = list(CLASS_CODES) + [NONE_LABEL]
    index = {code: i for i, code in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for rid, truth in truths.items():
        if rid not in predicted:
            continue
        row = index[truth if truth is not None else NONE_LABEL]
        col_label = predicted[rid]
        col = index[col_label if col_label is not None else NONE_LABEL]
        counts[row, col] += 1

    col_sums = counts.sum(axis=0)
    row_sums = counts.sum(axis=1)
    by_column = np.zeros_like(counts, dtype=np.float64)
    by_row = np.zeros_like(counts, dtype=np.float64)
    nz_col = col_sums > 0
    nz_row = row_sums > 0
    by_column[:, nz_col] = counts[:, nz_col] / col_sums[nz_col]
    by_row[nz_row, :] = counts[nz_row, :] / row_sums[nz_row, None]
    return ConfusionMatrix(
        labels=labels, counts=counts, by_column=by_column, by_row=by_row,
        empty_columns=[labels[i] for i in range(len(labels)) if not nz_col[i]],
        empty_rows=[labels[i] for i in range(len(labels)) if not nz_row[i]])


def evaluate(scores: Mapping[str, Sequence[float]],
             truths: Mapping[str, str | None],
             threshold: float = 0.5) -> MetricsReport:
    """Score a single-label test set.

    ``scores`` maps record id to the 10 per-class confidences; ``truths``
    maps record id to its class code (or None for unlabeled). A record
    predicts its argmax class when that score clears the threshold,
    otherwise None. AP for class c ranks every test record by scores[c]
    with the class-c records as positives; classes without test images are
    flagged and excluded from the means.
    """
    if not truths:
        raise ValueError("empty test set")
    ids = sorted(truths)
    matrix = np.asarray([scores[rid] for rid in ids], dtype=np.float64)
    if matrix.shape[1] != N_CLASSES:
        raise ValueError(f"expected {N_CLASSES} scores per record")

    best = matrix.argmax(axis=1)
    best_score = matrix[np.arange(len(ids)), best]
    predicted: dict[str, str | None] = {}
    for i, rid in enumerate(ids):
        predicted[rid] = (CLASS_CODES[best[i]]
                          if best_score[i] >= threshold else None)

    per_class: dict[str, dict[str, Any]] = {}
    flagged: list[str] = []
    for code in CLASS_CODES:
        c = by_code(code).index
        n_test = sum(1 for rid in ids if truths[rid] == code)
        tp = sum(1 for rid in ids if truths[rid] == code and predicted[rid] == code)
        fp = sum(1 for rid in ids if truths[rid] != code and predicted[rid] == code)
        fn = n_test - tp
        precision, recall, f1 = precision_recall_f1(tp, fp, fn)
        entry: dict[str, Any] = {
            "n_test": n_test, "tp": tp, "fp": fp, "fn": fn,
            "precision": precision, "recall": recall, "f1": f1,
        }
        if n_test > 0:
            entry["ap"] = average_precision(
                matrix[:, c].tolist(),
                [1 if truths[rid] == code else 0 for rid in ids])
        else:
            entry["ap"] = None
            flagged.append(code)
        per_class[code] = entry

    scored = [code for code in CLASS_CODES if code not in flagged]
    means = {
        metric: float(np.mean([per_class[c][metric] for c in scored]))
        for metric in ("precision", "recall", "f1", "ap")
    } if scored else {m: 0.0 for m in ("precision", "recall", "f1", "ap")}
    accuracy = float(np.mean([
        1.0 if predicted[rid] == truths[rid] else 0.0 for rid in ids]))
    return MetricsReport(per_class=per_class, means=means, threshold=threshold,
                         accuracy=accuracy, flagged=flagged)


def predictions_as_codes(scores: Mapping[str, Sequence[float]],
                         threshold: float) -> dict[str, str | None]:
    out: dict[str, str | None] = {}
    for rid, row in scores.items():
        arr = np.asarray(row, dtype=np.float64)
        best = int(arr.argmax())
        out[rid] = CLASS_CODES[best] if arr[best] >= threshold else None
    return out


def ablation_sweep(freeze_levels: Sequence[str],
                   run_level: Callable[[str], dict[str, Any]],
                   ) -> dict[str, dict[str, Any]]:
    """Train/evaluate one model per freeze level via the supplied runner
    (identical seeds across levels are the caller's contract) and collect
    the per-level reports. Levels run sequentially; results depend only on
    the level, never on sweep order."""
    results: dict[str, dict[str, Any]] = {}
    for level in freeze_levels:
        log.info("ablation: freeze level %s", level)
        results[level] = run_level(level)
    return results


def ablation_csv_rows(results: Mapping[str, Mapping[str, Any]]) -> list[str]:
    """Plot-data rows (freeze level vs validation means) for the sweep."""
    rows = ["freeze_level,val_mean_ap,val_accuracy"]
    for level, report in results.items():
        rows.append(f"{level},{report.get('val_mean_ap', '')},"
                    f"{report.get('val_accuracy', '')}")
    return rows
