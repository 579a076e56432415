"""Threshold detector and the evaluation metrics FPR95, AUROC and ID accuracy.

Scores are oriented "higher = more in-distribution" throughout.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError


def detect(score, mu):
    """1 (ID) where ``score >= mu``, else 0 (OOD). Works on scalars and arrays."""
    out = (np.asarray(score) >= mu).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass
class DetectionOutcome:
    threshold_mu: float
    decisions: np.ndarray
    id_scores: np.ndarray
    ood_scores: np.ndarray


def _nonempty(name, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ConfigError(f"{name} must be non-empty")
    return x


def _required_count(tpr: float, n: int) -> int:
    """Smallest k with k / n >= tpr, evaluated exactly as written."""
    k = min(max(math.ceil(tpr * n), 0), n)
    while k > 0 and (k - 1) / n >= tpr:
        k -= 1
    while k < n and k / n < tpr:
        k += 1
    return k


def tpr_threshold(id_scores, tpr: float = 0.95) -> float:
    """Largest mu such that the fraction of ID scores >= mu is at least ``tpr``."""
    ids = np.sort(_nonempty("id_scores", id_scores))
    if not 0 < tpr <= 1:
        raise ConfigError(f"tpr must lie in (0, 1], got {tpr!r}")
    k = max(_required_count(tpr, ids.size), 1)
    return float(ids[ids.size - k])


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    ood = _nonempty("ood_scores", ood_scores)
    mu = tpr_threshold(id_scores, tpr)
    return float(np.mean(ood >= mu))


def detection_outcome(id_scores, ood_scores, tpr: float = 0.95) -> DetectionOutcome:
    ids = _nonempty("id_scores", id_scores)
    ood = _nonempty("ood_scores", ood_scores)
    mu = tpr_threshold(ids, tpr)
    return DetectionOutcome(mu, detect(np.concatenate([ids, ood]), mu), ids, ood)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with midrank ties: P(id > ood) + 0.5 P(id == ood)."""
    ids = _nonempty("id_scores", id_scores)
    ood = _nonempty("ood_scores", ood_scores)
    ranks = rankdata(np.concatenate([ids, ood]), method="average")
    n1, n0 = ids.size, ood.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def id_top1_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0 or p.shape != y.shape:
        raise ConfigError(f"predictions ({p.size}) and labels ({y.size}) must be equal-length and non-empty")
    return float(np.mean(p == y))


@dataclass
class MetricsReport:
    fpr95: float
    auroc: float
    id_top1: float
    per_dataset: dict = field(default_factory=dict)  # name -> (fpr95, auroc)
    averages: tuple = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "fpr95": self.fpr95,
            "auroc": self.auroc,
            "id_top1": self.id_top1,
            "per_dataset": {k: {"fpr95": v[0], "auroc": v[1]} for k, v in self.per_dataset.items()},
            "average": {"fpr95": self.averages[0], "auroc": self.averages[1]},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "fpr95", "auroc"])
        for name, (f, a) in self.per_dataset.items():
            w.writerow([name, f"{f:.6f}", f"{a:.6f}"])
        w.writerow(["Average", f"{self.averages[0]:.6f}", f"{self.averages[1]:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def build_report(id_scores, ood_scores: dict, predictions=None, labels=None, tpr: float = 0.95) -> MetricsReport:
    """Per-OOD-dataset FPR95/AUROC plus unweighted averages.

    ``ood_scores`` maps dataset name to scores; its iteration order is the
    column order of the report. ``fpr95``/``auroc`` on the report are the
    averages.
    """
    if id_scores is None or np.size(id_scores) == 0:
        raise DataError("report needs ID scores")
    if not ood_scores:
        raise DataError("report needs at least one OOD dataset")
    per = {
        name: (fpr_at_tpr(id_scores, s, tpr), auroc(id_scores, s)) for name, s in ood_scores.items()
    }
    avg = (
        float(np.mean([v[0] for v in per.values()])),
        float(np.mean([v[1] for v in per.values()])),
    )
    acc = id_top1_accuracy(predictions, labels) if predictions is not None else float("nan")
    return MetricsReport(avg[0], avg[1], acc, per, avg)
