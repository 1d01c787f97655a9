"""Recording-level anomaly scores, AUC and partial AUC, and report writers.

AUC is the Mann-Whitney statistic with ties counted as one half. pAUC is the
area under the empirical ROC for false-positive rates in [0, p], interpolated
linearly at p and divided by p (no McClish correction).
"""
import csv
import io
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SingleClassError
from .features import FeatureConfig, recording_windows

AGGREGATIONS = ("mean", "max")
# unlabeled scores (e.g. training recordings) are ignored by the metrics
LABELS = ("normal", "anomaly", "unlabeled")


@dataclass(frozen=True)
class AnomalyScore:
    recording_id: str
    score: float
    label: str
    path: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"{self.recording_id}: non-finite anomaly score")
        if self.label not in LABELS:
            raise ValueError(f"{self.recording_id}: label must be one of {LABELS}, got {self.label!r}")


@dataclass
class EvalReport:
    machine_type: str
    machine_id: str
    auc: float
    pauc: float
    p: float
    n_normal: int
    n_anomaly: int
    scores: list = field(default_factory=list)


def aggregate(nlls, how="mean"):
    if how not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    nlls = np.asarray(nlls, dtype=np.float64)
    return float(nlls.mean() if how == "mean" else nlls.max())


def score_windows(model, windows, recording_id="", label="normal", path="", aggregation="mean"):
    values = windows.values if hasattr(windows, "values") else windows
    return AnomalyScore(recording_id, aggregate(model.score(values), aggregation), label, path)


def score_recording(model, rec, feature_cfg=FeatureConfig(), aggregation="mean"):
    """Aggregate the window NLLs of one recording into an :class:`AnomalyScore`."""
    windows = recording_windows(rec, feature_cfg)
    return score_windows(model, windows, rec.recording_id, rec.label, rec.source_path, aggregation)


def _split(scores):
    normal = np.array([s.score for s in scores if s.label == "normal"], dtype=np.float64)
    anomaly = np.array([s.score for s in scores if s.label == "anomaly"], dtype=np.float64)
    if len(normal) == 0 or len(anomaly) == 0:
        raise SingleClassError(f"need both classes, got {len(normal)} normal and {len(anomaly)} anomalous")
    return normal, anomaly


def auc(scores):
    """P(anomaly score > normal score) + 0.5 * P(tie), from exact integer pair counts."""
    normal, anomaly = _split(scores)
    normal = np.sort(normal)
    below = np.searchsorted(normal, anomaly, side="left")
    not_above = np.searchsorted(normal, anomaly, side="right")
    twice_wins = int(np.sum(below + not_above))  # 2 * (strict wins) + ties
    return twice_wins / (2 * len(normal) * len(anomaly))


def roc_curve(scores):
    """Empirical ROC vertices ``(fpr, tpr)``, one per distinct score threshold, from (0, 0) to (1, 1)."""
    normal, anomaly = _split(scores)
    values = np.concatenate([normal, anomaly])
    is_anomaly = np.concatenate([np.zeros(len(normal)), np.ones(len(anomaly))])
    order = np.argsort(-values, kind="stable")
    values, is_anomaly = values[order], is_anomaly[order]
    last_of_run = np.r_[values[1:] != values[:-1], True]
    tp = np.cumsum(is_anomaly)[last_of_run]
    fp = np.cumsum(1.0 - is_anomaly)[last_of_run]
    fpr = np.r_[0.0, fp / len(normal)]
    tpr = np.r_[0.0, tp / len(anomaly)]
    return fpr, tpr


def pauc(scores, p=0.1):
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    fpr, tpr = roc_curve(scores)
    if p == 1.0:
        return float(np.trapezoid(tpr, fpr))
    inside = fpr <= p
    x, y = fpr[inside], tpr[inside]
    # fpr is non-decreasing, so the first vertex beyond p closes the last segment
    j = int(np.argmax(fpr > p))
    y_p = tpr[j - 1] + (tpr[j] - tpr[j - 1]) * (p - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
    # at a vertical run exactly on fpr == p keep the highest tpr
    x, y = np.r_[x, p], np.r_[y, max(y_p, y[-1])]
    return float(np.trapezoid(y, x) / p)


def evaluate_scores(scores, machine_type, machine_id, p=0.1):
    normal, anomaly = _split(scores)
    return EvalReport(machine_type, machine_id, auc(scores), pauc(scores, p), p, len(normal), len(anomaly),
                      list(scores))


def evaluate_id(model, recordings, machine_type, machine_id, feature_cfg=FeatureConfig(), p=0.1,
                aggregation="mean"):
    """Score every labelled test recording of one machine ID and summarize."""
    scores = [score_recording(model, rec, feature_cfg, aggregation) for rec in recordings]
    return evaluate_scores(scores, machine_type, machine_id, p)


def average_reports(reports, machine_type, machine_id="mean"):
    """Mean AUC and pAUC over ``reports`` (exact mean, rounded once); counts are summed over them."""
    if not reports:
        raise ValueError("no reports to average")
    return EvalReport(
        machine_type, machine_id,
        float(statistics.mean(r.auc for r in reports)),
        float(statistics.mean(r.pauc for r in reports)),
        reports[0].p,
        sum(r.n_normal for r in reports),
        sum(r.n_anomaly for r in reports),
    )


def summary_rows(reports):
    """Per-ID rows, then one mean row per machine type, then a ``total`` row over all IDs."""
    rows = list(reports)
    types = sorted({r.machine_type for r in reports})
    rows += [average_reports([r for r in reports if r.machine_type == t], t) for t in types]
    rows.append(average_reports(list(reports), "total", "mean"))
    return rows


REPORT_COLUMNS = ("machine_type", "machine_id", "auc", "pauc", "n_normal", "n_anomaly")


def report_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in summary_rows(reports):
        writer.writerow([r.machine_type, r.machine_id, repr(r.auc), repr(r.pauc), r.n_normal, r.n_anomaly])
    return buf.getvalue()


def scores_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("path", "score", "label"))
    for r in reports:
        for s in r.scores:
            writer.writerow([s.path or s.recording_id, repr(s.score), s.label])
    return buf.getvalue()


def report_table(reports):
    p = reports[0].p if reports else 0.1
    lines = [
        f"AUC and pAUC (p = {p:g}, linear normalization: area over FPR in [0, p] divided by p)",
        f"{'machine_type':<14}{'id':<8}{'AUC':>8}{'pAUC':>8}{'normal':>8}{'anomaly':>9}",
    ]
    for r in summary_rows(reports):
        lines.append(f"{r.machine_type:<14}{r.machine_id:<8}{r.auc * 100:8.2f}{r.pauc * 100:8.2f}"
                     f"{r.n_normal:8d}{r.n_anomaly:9d}")
    return "\n".join(lines) + "\n"


def write_reports(out_dir, reports):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(reports))
    (out / "report.txt").write_text(report_table(reports))
    (out / "scores.csv").write_text(scores_csv(reports))
    return out / "report.csv"
