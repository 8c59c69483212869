"""Competition metrics for expression classification and valence-arousal regression."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np

N_CATEGORIES = 7
EXPRESSION_NAMES = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise")


@dataclass
class MetricsReport:
    accuracy: float
    f1_per_category: list[float]
    macro_f1: float
    expression_score: float
    confusion: np.ndarray
    ccc_valence: Optional[float] = None
    ccc_arousal: Optional[float] = None
    extras: dict = field(default_factory=dict)


def confusion_matrix(truth, predicted, n_categories: int = N_CATEGORIES) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    cm = np.zeros((n_categories, n_categories), dtype=np.int64)
    np.add.at(cm, (truth, predicted), 1)
    return cm


def classification_metrics(truth, predicted, n_categories: int = N_CATEGORIES):
    """Accuracy, per-category F1, macro F1 and confusion matrix (rows = truth).

    Categories absent from both truth and prediction contribute F1 = 0 to the
    macro mean, so the mean is always over all ``n_categories``.
    """
    truth = np.asarray(truth, dtype=np.int64).ravel()
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    if truth.shape != predicted.shape:
        raise ValueError(f"length mismatch: truth has {truth.size}, predicted has {predicted.size}")
    if truth.size == 0:
        raise ValueError("at least one item is required")
    for name, arr in (("truth", truth), ("predicted", predicted)):
        if arr.min() < 0 or arr.max() >= n_categories:
            raise ValueError(f"{name} values must lie in 0..{n_categories - 1}")

    cm = confusion_matrix(truth, predicted, n_categories)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); 0/0 -> 0
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    accuracy = float(tp.sum() / truth.size)
    return accuracy, f1.tolist(), float(f1.mean()), cm


def expression_score(macro_f1: float, accuracy: float) -> float:
    return 0.67 * macro_f1 + 0.33 * accuracy


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population (divide-by-n) moments.

    When both series are constant with equal means the ratio is 0/0; we return
    1.0 if the series agree elementwise and 0.0 otherwise.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("ccc needs at least two points")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    sxy = np.mean(dx * dy)
    sx2 = np.mean(dx * dx)
    sy2 = np.mean(dy * dy)
    denom = sx2 + sy2 + (mx - my) ** 2
    if denom == 0.0:
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(2.0 * sxy / denom)


def evaluate(truth, predicted, va_truth=None, va_pred=None) -> MetricsReport:
    acc, f1s, macro, cm = classification_metrics(truth, predicted)
    report = MetricsReport(
        accuracy=acc,
        f1_per_category=f1s,
        macro_f1=macro,
        expression_score=expression_score(macro, acc),
        confusion=cm,
    )
    if va_truth is not None and va_pred is not None:
        va_truth = np.asarray(va_truth, dtype=float)
        va_pred = np.asarray(va_pred, dtype=float)
        report.ccc_valence = ccc(va_pred[:, 0], va_truth[:, 0])
        report.ccc_arousal = ccc(va_pred[:, 1], va_truth[:, 1])
    return report


def round_half_up(value: float, digits: int = 3) -> str:
    q = Decimal(1).scaleb(-digits)
    # repr() keeps the shortest decimal form so 0.5245 rounds to 0.525, not 0.524
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def render_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text table. Float cells are rounded half-up to 3 decimals."""
    cells = []
    for row in rows:
        line = []
        for col in columns:
            v = row.get(col, "")
            if isinstance(v, bool):
                v = "x" if v else "-"
            elif isinstance(v, (float, np.floating)):
                v = round_half_up(v)
            elif v is None:
                v = "-"
            line.append(str(v))
        cells.append(line)
    widths = [max([len(c)] + [len(line[i]) for line in cells]) for i, c in enumerate(columns)]
    fmt = lambda parts: "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [fmt(columns), fmt(["-" * w for w in widths])]
    out.extend(fmt(line) for line in cells)
    return "\n".join(out) + "\n"


def render_report(report: MetricsReport, method: str = "model") -> str:
    row = {
        "Method": method,
        "Score": report.expression_score,
        "F1": report.macro_f1,
        "Acc": report.accuracy,
    }
    columns = ["Method", "Score", "F1", "Acc"]
    if report.ccc_valence is not None:
        row["CCC-V"] = report.ccc_valence
        row["CCC-A"] = report.ccc_arousal
        columns += ["CCC-V", "CCC-A"]
    return render_table([row], columns)


def report_to_rows(report: MetricsReport) -> list[tuple[str, str]]:
    """Flatten a report into (key, value) pairs for report.csv."""
    rows = [
        ("score", repr(report.expression_score)),
        ("macro_f1", repr(report.macro_f1)),
        ("accuracy", repr(report.accuracy)),
    ]
    for i, f in enumerate(report.f1_per_category):
        rows.append((f"f1_{EXPRESSION_NAMES[i]}", repr(f)))
    rows.append(("ccc_valence", "" if report.ccc_valence is None else repr(report.ccc_valence)))
    rows.append(("ccc_arousal", "" if report.ccc_arousal is None else repr(report.ccc_arousal)))
    for i in range(report.confusion.shape[0]):
        rows.append((f"confusion_{i}", " ".join(str(int(v)) for v in report.confusion[i])))
    for k, v in report.extras.items():
        rows.append((k, str(v)))
    return rows
