"""Evaluation metrics for MOS prediction at utterance and system level.

Spearman correlation is computed as Pearson over fractional (average) ranks
rather than the 1 - 6*sum(d^2)/(n(n^2-1)) shortcut, because the shortcut is
wrong in the presence of ties and MOS data ties constantly. Kendall's tau
follows the plain (C - D)/(C + D) form with tied pairs excluded; the tau-b
tie correction is available behind a flag.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from earmos.errors import FormatError, UndefinedMetricError

PREDICTIONS_HEADER = ["system_id", "utterance_id", "predicted_mos", "true_mos"]
METRIC_NAMES = ["mse", "lcc", "srcc", "ktau"]


@dataclass(frozen=True)
class PredictionRecord:
    system_id: str
    utterance_id: str
    predicted: float
    actual: float

    def __post_init__(self):
        if not (math.isfinite(self.predicted) and math.isfinite(self.actual)):
            raise ValueError("prediction records must hold finite scores")


def _check_lists(pred: Sequence[float], actual: Sequence[float], min_n: int) -> None:
    if len(pred) != len(actual):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(actual)}")
    if len(pred) < min_n:
        raise ValueError(f"need at least {min_n} points, got {len(pred)}")


def mse(pred: Sequence[float], actual: Sequence[float]) -> float:
    _check_lists(pred, actual, 1)
    p, a = np.asarray(pred, np.float64), np.asarray(actual, np.float64)
    return float(np.mean((a - p) ** 2))


def lcc(pred: Sequence[float], actual: Sequence[float]) -> float:
    """Pearson correlation, computational form."""
    _check_lists(pred, actual, 2)
    x, y = np.asarray(pred, np.float64), np.asarray(actual, np.float64)
    n = x.size
    sx, sy = x.sum(), y.sum()
    num = n * (x * y).sum() - sx * sy
    den_sq = (n * (x * x).sum() - sx * sx) * (n * (y * y).sum() - sy * sy)
    if den_sq <= 0.0:
        raise UndefinedMetricError("correlation undefined for a constant list")
    return float(num / np.sqrt(den_sq))


def fractional_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank positions."""
    v = np.asarray(values, np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pred: Sequence[float], actual: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson over fractional ranks."""
    _check_lists(pred, actual, 2)
    return lcc(fractional_ranks(pred), fractional_ranks(actual))


def ktau(pred: Sequence[float], actual: Sequence[float], tie_correction: bool = False) -> float:
    """Kendall rank correlation over all unordered pairs.

    Default is (C - D)/(C + D) with pairs tied in either list excluded; with
    tie_correction the tau-b denominator sqrt((C+D+T_p)(C+D+T_a)) is used,
    T_p/T_a counting pairs tied only in the other list's counterpart.
    """
    _check_lists(pred, actual, 2)
    n = len(pred)
    conc = disc = tied_pred_only = tied_actual_only = 0
    for i in range(n):
        for j in range(i + 1, n):
            dp = pred[i] - pred[j]
            da = actual[i] - actual[j]
            if dp == 0.0 and da == 0.0:
                continue
            if dp == 0.0:
                tied_pred_only += 1
            elif da == 0.0:
                tied_actual_only += 1
            elif dp * da > 0.0:
                conc += 1
            else:
                disc += 1
    if tie_correction:
        den_sq = (conc + disc + tied_pred_only) * (conc + disc + tied_actual_only)
        if den_sq == 0:
            raise UndefinedMetricError("tau undefined: no untied pairs")
        return (conc - disc) / math.sqrt(den_sq)
    if conc + disc == 0:
        raise UndefinedMetricError("tau undefined: no untied pairs")
    return (conc - disc) / (conc + disc)


def system_level(records: Sequence[PredictionRecord]) -> tuple[list[float], list[float]]:
    """Mean predicted and actual score per system, ordered by system_id."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[str, list[PredictionRecord]] = {}
    for r in records:
        groups.setdefault(r.system_id, []).append(r)
    pred_means, actual_means = [], []
    for sid in sorted(groups):
        rs = groups[sid]
        pred_means.append(sum(r.predicted for r in rs) / len(rs))
        actual_means.append(sum(r.actual for r in rs) / len(rs))
    return pred_means, actual_means


def read_predictions_csv(path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTIONS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        records = []
        for row in reader:
            if len(row) != 4:
                raise FormatError(f"{path}: malformed row {row!r}")
            try:
                records.append(PredictionRecord(row[0], row[1], float(row[2]), float(row[3])))
            except ValueError as exc:
                raise FormatError(f"{path}: bad row {row!r}: {exc}") from exc
    return records


def write_predictions_csv(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for r in records:
            writer.writerow([r.system_id, r.utterance_id, f"{r.predicted:.6f}", f"{r.actual:.6f}"])


def compute_all(pred: Sequence[float], actual: Sequence[float]) -> dict[str, float]:
    return {
        "mse": mse(pred, actual),
        "lcc": lcc(pred, actual),
        "srcc": srcc(pred, actual),
        "ktau": ktau(pred, actual),
    }


def metrics_report(records: Sequence[PredictionRecord], fmt: str = "text") -> str:
    """Four metrics at utterance and system level, as aligned text or CSV."""
    pred = [r.predicted for r in records]
    actual = [r.actual for r in records]
    levels = [("utterance", compute_all(pred, actual))]
    sys_pred, sys_actual = system_level(records)
    if len(sys_pred) >= 2:
        levels.append(("system", compute_all(sys_pred, sys_actual)))
    if fmt == "csv":
        lines = ["level,metric,value"]
        for level, values in levels:
            lines += [f"{level},{name},{values[name]:.6f}" for name in METRIC_NAMES]
        return "\n".join(lines)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"{'level':<10}" + "".join(f"{name:>10}" for name in METRIC_NAMES)]
    for level, values in levels:
        lines.append(f"{level:<10}" + "".join(f"{values[name]:>10.4f}" for name in METRIC_NAMES))
    return "\n".join(lines)
