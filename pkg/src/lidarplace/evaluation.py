"""Ground-truth loops, TP/FP classification, ROC/AUC and the row-resolution study."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .pipeline import Config, Recognizer, STAGES

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class GroundTruth:
    """Unordered true-loop pairs, stored as (a, b) with a < b."""

    pairs: set
    radius: float
    min_gap: float

    def __contains__(self, pair):
        a, b = pair
        return (min(a, b), max(a, b)) in self.pairs

    def __len__(self):
        return len(self.pairs)

    def partners(self):
        out = {}
        for a, b in self.pairs:
            out.setdefault(a, set()).add(b)
            out.setdefault(b, set()).add(a)
        return out


def ground_truth(trajectory, radius=2.0, min_gap=30.0) -> GroundTruth:
    """All pairs more than ``min_gap`` seconds apart whose positions lie within ``radius``.

    ``trajectory`` is a sequence of (scan id, timestamp, xyz position).
    """
    ids = np.array([int(t[0]) for t in trajectory], dtype=np.int64)
    ts = np.array([float(t[1]) for t in trajectory])
    pos = np.array([np.asarray(t[2], dtype=float)[:3] for t in trajectory]).reshape(-1, 3)
    if len(ids) == 0:
        return GroundTruth(set(), radius, min_gap)
    if not np.isfinite(pos).all():
        raise ValueError("trajectory positions must be finite")
    pairs = set()
    for a, b in cKDTree(pos).query_pairs(radius, output_type="ndarray"):
        if abs(ts[a] - ts[b]) > min_gap and np.linalg.norm(pos[a] - pos[b]) <= radius:
            ia, ib = ids[a], ids[b]
            pairs.add((int(min(ia, ib)), int(max(ia, ib))))
    return GroundTruth(pairs, radius, min_gap)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: Optional[float]
    n_pos: int
    n_neg: int


@dataclass
class EvalReport:
    detected: int = 0
    tp: int = 0
    fp: int = 0
    mean_time_ms: float = float("nan")
    roc: Optional[RocCurve] = None
    extra: dict = field(default_factory=dict)

    @property
    def tp_rate(self):
        return self.tp / self.detected if self.detected else 0.0

    @property
    def fp_rate(self):
        return self.fp / self.detected if self.detected else 0.0

    def summary(self, label="Ours") -> str:
        head = f"{'Method':<10} {'Detected loops':>14} {'True positives':>16} {'False positives':>16} {'Time (ms)':>10}"
        row = (f"{label:<10} {self.detected:>14} {self.tp:>8} ({100 * self.tp_rate:.0f}%)"
               f"{'':>2}{self.fp:>8} ({100 * self.fp_rate:.0f}%) {self.mean_time_ms:>10.1f}")
        return head + "\n" + row


def classify(detections, positions, radius=2.0) -> EvalReport:
    """A detection is a true positive iff its two scans are less than ``radius`` apart."""
    tp = fp = 0
    totals = []
    for d in detections:
        if d.i not in positions or d.j not in positions:
            raise KeyError(f"detection ({d.i}, {d.j}) references a scan without a pose")
        if np.linalg.norm(np.asarray(positions[d.i]) - np.asarray(positions[d.j])) < radius:
            tp += 1
        else:
            fp += 1
        totals.append(sum(d.timings.get(s, 0.0) for s in STAGES))
    mean_t = float(np.mean(totals)) if totals else float("nan")
    return EvalReport(len(detections), tp, fp, mean_t)


def query_labels(records, gt: GroundTruth):
    """Per-query (score, label) for ROC analysis.

    A query with a candidate is positive iff (query, candidate) is a true loop;
    a query without a candidate is positive iff it has a true-loop partner among
    earlier scans (a miss). Queries without a verified candidate score -1.
    """
    partners = gt.partners()
    scores, labels = [], []
    for r in records:
        if r.candidate >= 0:
            y = (r.i, r.candidate) in gt
        else:
            y = any(p < r.i for p in partners.get(r.i, ()))
        scores.append(float(r.inliers) if r.candidate >= 0 else -1.0)
        labels.append(bool(y))
    return np.array(scores), np.array(labels, dtype=bool)


def roc_from_scores(scores, labels, sweep=None) -> RocCurve:
    """Predict positive iff score > threshold; AUC by the trapezoid rule over FPR."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if sweep is None:
        sweep = np.concatenate([[-np.inf], np.unique(scores)])
    th = np.sort(np.asarray(sweep, dtype=float))
    pred = scores[None, :] > th[:, None]
    tp = (pred & labels).sum(axis=1)
    fp = (pred & ~labels).sum(axis=1)
    tpr = tp / n_pos if n_pos else np.full(len(th), np.nan)
    fpr = fp / n_neg if n_neg else np.full(len(th), np.nan)
    auc = None
    if n_pos and n_neg:
        x = np.concatenate([[0.0], fpr[::-1], [1.0]])
        y = np.concatenate([[0.0], tpr[::-1], [1.0]])
        auc = float(_trapezoid(y, x))
    return RocCurve(th, fpr, tpr, auc, n_pos, n_neg)


def roc(records, gt: GroundTruth, sweep=None, score="inliers") -> RocCurve:
    """ROC over per-scan best-candidate records, sweeping the inlier count (or BoW score)."""
    s, y = query_labels(records, gt)
    if score == "bow":
        s = np.array([r.bow_score if r.candidate >= 0 else -1.0 for r in records])
    elif score != "inliers":
        raise ValueError(f"unknown ROC score {score!r}")
    return roc_from_scores(s, y, sweep)


def write_roc(curve: RocCurve, path):
    with open(path, "w") as fh:
        fh.write("threshold,fpr,tpr\n")
        for t, f, r in zip(curve.thresholds, curve.fpr, curve.tpr):
            fh.write(f"{t:g},{f:.6f},{r:.6f}\n")


def resolution_study(scans, poses, vocab, config: Optional[Config] = None, rows=(128, 64, 32, 16),
                     radius=2.0) -> list:
    """Rerun the detector with every ``rows`` image height; one report per height.

    Each report's ``extra`` carries the row count and mean features per scan.
    """
    base = config or Config()
    positions = {s.id: p.translation for s, p in zip(scans, poses)}
    out = []
    for r in rows:
        cfg = Config(**{**vars(base), "rows": 0 if r == base.height else int(r)})
        rec = Recognizer(vocab, cfg)
        dets = rec.run(scans)
        rep = classify(dets, positions, radius)
        rep.extra = {"rows": int(r), "mean_features": float(np.mean([x.n_features for x in rec.records]))}
        log.info("rows %d: %d detections, %.1f features/scan", r, rep.detected, rep.extra["mean_features"])
        out.append(rep)
    return out
