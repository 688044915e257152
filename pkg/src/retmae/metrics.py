"""Classification and segmentation metrics, patient-level aggregation and significance tests."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import ndimage, special
from scipy.stats import rankdata

from .core import DataError, ShapeError, UndefinedMetricError

# ---------------------------------------------------------------------------
# classification


def _as_score_matrix(scores, labels) -> tuple[np.ndarray, np.ndarray, bool]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim == 1:
        return scores[:, None], labels, True
    if scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"{scores.shape[0]} score rows for {labels.shape[0]} labels")
    return scores, labels, False


def binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positives and negatives")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Sum over distinct thresholds of recall increment times precision."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _weighted_ovr(metric, scores, labels) -> float:
    mat, labels, binary = _as_score_matrix(scores, labels)
    if len(labels) == 0:
        raise UndefinedMetricError("empty input")
    if len(np.unique(labels)) < 2:
        raise UndefinedMetricError("metric undefined with a single class present")
    if binary:
        return metric(mat[:, 0], labels == 1)
    values, weights = [], []
    for c in range(mat.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        values.append(metric(mat[:, c], pos))
        weights.append(pos.sum())
    if not values:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.average(values, weights=weights))


def auroc_weighted_ovr(scores, labels) -> float:
    """One-vs-rest AUROC averaged with positive-count weights.

    ``scores`` is (N, C) class scores, or (N,) positive-class scores for binary labels.
    """
    return _weighted_ovr(binary_auroc, scores, labels)


def average_precision_weighted(scores, labels) -> float:
    return _weighted_ovr(binary_average_precision, scores, labels)


def balanced_accuracy(pred, true) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if true.size == 0:
        raise UndefinedMetricError("balanced accuracy of an empty set")
    if pred.shape != true.shape:
        raise ShapeError(f"pred {pred.shape} vs true {true.shape}")
    recalls = [np.mean(pred[true == c] == c) for c in np.unique(true)]
    return float(np.mean(recalls))


# ---------------------------------------------------------------------------
# segmentation


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return pred, true


def dice(pred, true) -> float:
    """2|P&T| / (|P|+|T|); NaN when both masks are empty."""
    pred, true = _pair(pred, true)
    denom = int(pred.sum()) + int(true.sum())
    if denom == 0:
        return float("nan")
    return 2.0 * int((pred & true).sum()) / denom


def iou(pred, true) -> float:
    pred, true = _pair(pred, true)
    union = int((pred | true).sum())
    if union == 0:
        return float("nan")
    return int((pred & true).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~inner


def _spacing2(spacing) -> tuple[float, float]:
    if spacing is None:
        return 1.0, 1.0
    sx, sy = float(spacing[0]), float(spacing[1])
    if sx <= 0 or sy <= 0:
        raise DataError("spacing must be positive")
    return sx, sy


def surface_distances(pred, true, spacing=None) -> np.ndarray:
    """Pooled directed nearest boundary distances, pred->true then true->pred."""
    pred, true = _pair(pred, true)
    if not pred.any() or not true.any():
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    sx, sy = _spacing2(spacing)
    bp, bt = boundary(pred), boundary(true)
    # rows are the y axis, columns the x axis
    dt_to_true = ndimage.distance_transform_edt(~bt, sampling=(sy, sx))
    dt_to_pred = ndimage.distance_transform_edt(~bp, sampling=(sy, sx))
    return np.concatenate([dt_to_true[bp], dt_to_pred[bt]])


def hd95(pred, true, spacing=None) -> float:
    return float(np.percentile(surface_distances(pred, true, spacing), 95))


def avd(pred, true, spacing=(1.0, 1.0, 1.0)) -> float:
    """Absolute volume difference; masks or voxel counts, spacing (x, y, slice) in mm or a voxel volume."""
    def count(v):
        a = np.asarray(v)
        return int(a.astype(bool).sum()) if a.ndim else int(a)

    voxel = float(np.prod(spacing)) if np.ndim(spacing) else float(spacing)
    if voxel <= 0:
        raise DataError("spacing must be positive")
    return abs(count(pred) - count(true)) * voxel


SEG_METRICS = ("dice", "iou", "hd95", "avd")


def segmentation_scores(pred_map: np.ndarray, true_map: np.ndarray, classes: Iterable[int],
                        spacing=(1.0, 1.0, 1.0), metrics: Sequence[str] = SEG_METRICS,
                        ) -> dict[str, dict[int, float]]:
    """metric -> class -> value for one B-scan (NaN marks an undefined entry)."""
    pred_map, true_map = np.asarray(pred_map), np.asarray(true_map)
    if pred_map.shape != true_map.shape:
        raise ShapeError(f"prediction {pred_map.shape} vs reference {true_map.shape}")
    out: dict[str, dict[int, float]] = {m: {} for m in metrics}
    for c in classes:
        p, t = pred_map == c, true_map == c
        for m in metrics:
            if m == "dice":
                v = dice(p, t)
            elif m == "iou":
                v = iou(p, t)
            elif m == "hd95":
                v = hd95(p, t, spacing[:2]) if p.any() and t.any() else float("nan")
            elif m == "avd":
                v = avd(p, t, spacing) if p.any() or t.any() else float("nan")
            else:
                raise DataError(f"unknown metric {m!r}")
            out[m][int(c)] = v
    return out


# ---------------------------------------------------------------------------
# aggregation


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class MetricReport:
    metric: str
    per_class: dict[int, float] = field(default_factory=dict)
    per_bscan: list[tuple[str, dict[int, float]]] = field(default_factory=list)
    per_patient: dict[str, float] = field(default_factory=dict)
    mean: float = float("nan")
    std: float = float("nan")
    n: int = 0

    def rows(self) -> list[tuple[str, str, str, str, float]]:
        """(level, unit_id, class, metric, value) records."""
        out = []
        for sid, vals in self.per_bscan:
            for c, v in sorted(vals.items()):
                out.append(("bscan", sid, str(c), self.metric, v))
        for pid, v in sorted(self.per_patient.items()):
            out.append(("patient", pid, "mean", self.metric, v))
        for c, v in sorted(self.per_class.items()):
            out.append(("aggregate", "all", str(c), self.metric, v))
        out.append(("aggregate", "all", "mean", self.metric, self.mean))
        out.append(("aggregate", "all", "std", self.metric, self.std))
        out.append(("aggregate", "all", "n", self.metric, float(self.n)))
        return out


def aggregate_patient(per_bscan: Sequence[tuple[str, Mapping[int, float]]], patient_of: Mapping[str, str],
                      metric: str = "dice") -> MetricReport:
    """Average each class over a patient's B-scans, then over classes; report across patients."""
    by_patient: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for sid, vals in per_bscan:
        if sid not in patient_of:
            raise DataError(f"B-scan {sid} has no patient")
        for c, v in vals.items():
            if not math.isnan(v):
                by_patient[patient_of[sid]][c].append(v)
    per_patient: dict[str, float] = {}
    class_means: dict[int, list[float]] = defaultdict(list)
    for pid in sorted(by_patient):
        cls_avg = {c: float(np.mean(v)) for c, v in by_patient[pid].items() if v}
        if not cls_avg:
            continue
        per_patient[pid] = float(np.mean(list(cls_avg.values())))
        for c, v in cls_avg.items():
            class_means[c].append(v)
    values = list(per_patient.values())
    return MetricReport(
        metric=metric,
        per_class={c: float(np.mean(v)) for c, v in sorted(class_means.items())},
        per_bscan=[(sid, dict(vals)) for sid, vals in per_bscan],
        per_patient=per_patient,
        mean=float(np.mean(values)) if values else float("nan"),
        std=_std(values),
        n=len(values),
    )


def replica_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across seed replicas."""
    return float(np.mean(values)), _std(values)


def write_report_csv(path: str | Path, reports: Iterable[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("level", "unit_id", "class", "metric", "value"))
        for rep in reports:
            for level, unit, c, m, v in rep.rows():
                w.writerow((level, unit, c, m, repr(float(v))))


# ---------------------------------------------------------------------------
# significance tests


class TTestResult(NamedTuple):
    statistic: float
    df: int
    p: float
    degenerate: bool  # zero pooled variance; p set by convention


def t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Pooled-variance Student t test; one-tailed p-value for mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise UndefinedMetricError("t test needs at least two replicas per group")
    df = na + nb - 2
    diff = a.mean() - b.mean()
    pooled = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / df
    se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    if se == 0.0:
        if diff == 0:
            return TTestResult(0.0, df, 0.5, True)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0 if diff > 0 else 1.0, True)
    t = diff / se
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))  # P(T > |t|)
    return TTestResult(float(t), df, float(tail if t > 0 else 1.0 - tail), False)


def t_test_one_tailed(a: Sequence[float], b: Sequence[float]) -> float:
    return t_test(a, b).p


def signed_ranks(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Midranks of |a-b| and the sign of each nonzero difference."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise UndefinedMetricError("all paired differences are zero")
    return rankdata(np.abs(d), method="average"), np.sign(d)


EXACT_LIMIT = 25


def _exact_null(ranks: np.ndarray) -> tuple[np.ndarray, int]:
    """Counts of each attainable doubled W+ under random signs."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts, total


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided signed-rank p-value; exact for up to 25 nonzero pairs."""
    ranks, signs = signed_ranks(a, b)
    n = len(ranks)
    w_plus = float(ranks[signs > 0].sum())
    if n <= EXACT_LIMIT:
        counts, _ = _exact_null(ranks)
        w2 = int(round(2 * w_plus))
        denom = 2 ** n
        lower = sum(counts[: w2 + 1]) / denom
        upper = sum(counts[w2:]) / denom
        return float(min(1.0, 2 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, math.erfc(abs(z) / math.sqrt(2))))
