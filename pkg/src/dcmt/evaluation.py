"""AUC, entire-space evaluation and prediction-distribution summaries."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy.stats import rankdata

from .features import Batch
from .model import Model, PredictionBatch


class UndefinedAUC(ValueError):
    pass


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with ties credited one half.

    Average ranks make the numerator a multiple of one half, so the result
    matches the pairwise count exactly.
    """
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("undefined AUC: labels hold a single class")
    ranks = rankdata(s)  # average ranks, 0.5 multiples
    twice = int(round(2.0 * ranks[y == 1].sum())) - n_pos * (n_pos + 1)
    return twice / (2.0 * n_pos * n_neg)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> List[tuple]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
                for i in range(len(self.counts))]


def histogram(values, buckets: int = 10) -> Histogram:
    """Fixed-width buckets over [0, 1], half-open except the last one."""
    if buckets < 1:
        raise ValueError("histogram needs at least one bucket")
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=buckets, range=(0.0, 1.0))
    return Histogram(edges, counts.astype(np.int64))


@dataclass
class EvalReport:
    space: str
    n: int
    cvr_auc: Optional[float] = None
    ctcvr_auc: Optional[float] = None
    ctr_auc: Optional[float] = None
    mean_r_hat_d: Optional[float] = None
    mean_r_hat_o: Optional[float] = None
    mean_r_hat_n: Optional[float] = None
    posterior_alpha: Optional[float] = None
    posterior_beta: Optional[float] = None
    posterior_gamma: Optional[float] = None
    gap_beta: Optional[float] = None
    histogram: List[tuple] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = [list(row) for row in self.histogram]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _safe_auc(labels, scores) -> Optional[float]:
    try:
        return auc(labels, scores)
    except UndefinedAUC:
        return None


def report_from_predictions(pred: PredictionBatch, data: Batch, space: str = "entire",
                            buckets: int = 10) -> EvalReport:
    if space not in ("entire", "click"):
        raise ValueError(f"space must be 'entire' or 'click', got {space!r}")
    m = data.o == 1
    rep = EvalReport(space=space, n=len(data))
    if space == "entire":
        if data.r_full is None:
            raise ValueError("entire-space CVR AUC needs the r_full column")
        rep.cvr_auc = _safe_auc(data.r_full, pred.r_hat)
    else:
        rep.cvr_auc = _safe_auc(data.r[m], pred.r_hat[m]) if m.any() else None
    rep.ctcvr_auc = _safe_auc(data.r, pred.t_hat)
    rep.ctr_auc = _safe_auc(data.o, pred.o_hat)
    if len(data):
        rep.mean_r_hat_d = float(pred.r_hat.mean())
    if m.any():
        rep.mean_r_hat_o = float(pred.r_hat[m].mean())
    if (~m).any():
        rep.mean_r_hat_n = float(pred.r_hat[~m].mean())
    if data.r_full is not None:
        rf = data.r_full.astype(np.float64)
        rep.posterior_beta = float(rf.mean()) if len(rf) else None
        rep.posterior_gamma = float(rf[m].mean()) if m.any() else None
        rep.posterior_alpha = float(rf[~m].mean()) if (~m).any() else None
        if rep.mean_r_hat_d is not None and rep.posterior_beta is not None:
            rep.gap_beta = abs(rep.mean_r_hat_d - rep.posterior_beta)
    rep.histogram = histogram(pred.r_hat, buckets).rows()
    return rep


def evaluate(model: Model, data: Batch, space: str = "entire", buckets: int = 10) -> EvalReport:
    return report_from_predictions(model.predict(data), data, space, buckets)


@dataclass
class Distribution:
    histogram: Histogram
    mean_d: float
    alpha: float
    beta: float
    gamma: float
    gap: float


def prediction_distribution(model: Model, data: Batch, buckets: int = 10) -> Distribution:
    """Histogram of CVR predictions over D next to the posterior means over N, D and O."""
    if buckets < 1:
        raise ValueError("histogram needs at least one bucket")
    if data.r_full is None:
        raise ValueError("posterior means need the r_full column")
    pred = model.predict(data)
    rf = data.r_full.astype(np.float64)
    m = data.o == 1
    mean_d = float(pred.r_hat.mean())
    beta = float(rf.mean())
    return Distribution(
        histogram(pred.r_hat, buckets), mean_d,
        float(rf[~m].mean()) if (~m).any() else float("nan"),
        beta,
        float(rf[m].mean()) if m.any() else float("nan"),
        abs(mean_d - beta),
    )


def write_report(path: Union[str, Path], report: EvalReport) -> None:
    Path(path).write_text(report.to_json() + "\n")


def write_histogram_csv(path: Union[str, Path], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket_low", "bucket_high", "count"])
        for lo, hi, c in rows:
            w.writerow([repr(lo), repr(hi), c])
