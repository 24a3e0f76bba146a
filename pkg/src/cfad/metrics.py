"""Evaluation harness: AUROC / AUPR, mean-rank aggregation, and end-to-end
dataset evaluation with FPS measurement."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from cfad.scoring import score_cloud


class SingleClassError(ValueError):
    """Raised when a metric needs both label classes but only one is present."""


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"auroc needs both classes: {n_pos} positives, {n_neg} negatives"
        )
    ranks = rankdata(scores)                    # average ranks handle ties
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Area under the precision-recall curve, descending-score threshold sweep.

    Tied scores are processed as one block (precision/recall move jointly);
    the area is accumulated step-wise without interpolation.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise SingleClassError("aupr needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # Block boundaries: last element of each run of equal scores.
    block_end = np.flatnonzero(np.diff(s) != 0)
    block_end = np.append(block_end, len(s) - 1)
    tp = np.cumsum(y)[block_end]
    pred_pos = block_end + 1
    precision = tp / pred_pos
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def mean_rank(table: np.ndarray) -> np.ndarray:
    """Mean rank per method over a (methods x categories) metric table.

    Higher metric is better; rank 1 is best, tied values share the average of
    their rank positions.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("table must be a non-empty 2-D array")
    ranks = np.stack([rankdata(-table[:, c]) for c in range(table.shape[1])], axis=1)
    return ranks.mean(axis=1)


@dataclass
class CategoryResult:
    category: str
    o_auroc: float | None
    p_auroc: float | None
    o_aupr: float | None
    p_aupr: float | None
    n_samples: int
    n_points: int
    notices: list = field(default_factory=list)


@dataclass
class EvalResult:
    per_category: list[CategoryResult]
    fps: float
    n_samples: int

    def _mean(self, attr):
        vals = [getattr(c, attr) for c in self.per_category if getattr(c, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def o_auroc(self):
        return self._mean("o_auroc")

    @property
    def p_auroc(self):
        return self._mean("p_auroc")

    @property
    def o_aupr(self):
        return self._mean("o_aupr")

    @property
    def p_aupr(self):
        return self._mean("p_aupr")

    def write_csv(self, path):
        fields = ["category", "o_auroc", "p_auroc", "o_aupr", "p_aupr",
                  "n_samples", "n_points", "fps"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(fields)
            for c in self.per_category:
                writer.writerow([c.category, c.o_auroc, c.p_auroc, c.o_aupr,
                                 c.p_aupr, c.n_samples, c.n_points, ""])
            writer.writerow(["AGGREGATE", self.o_auroc, self.p_auroc,
                             self.o_aupr, self.p_aupr, self.n_samples, "", self.fps])


def evaluate(scorer, test_set: dict, pool_points: str = "category") -> EvalResult:
    """Score a labeled test set and compute object- and point-level metrics.

    ``scorer`` maps a PointCloud to a ScoreResult (e.g. a bound network).
    ``test_set`` maps category name -> list of (cloud, object_label, mask);
    mask may be None, in which case point-level metrics are skipped for that
    category with a notice. Point scores are pooled per category by default
    ("category") or evaluated per sample and averaged ("sample").
    FPS counts scoring time only.
    """
    if pool_points not in ("category", "sample"):
        raise ValueError(f"unknown pooling {pool_points!r}")
    per_category = []
    total_samples = 0
    scoring_seconds = 0.0
    for category, items in test_set.items():
        obj_scores, obj_labels = [], []
        point_scores, point_labels = [], []
        per_sample_p = []
        notices = []
        n_points = 0
        for cloud, label, mask in items:
            t0 = time.perf_counter()
            result = scorer(cloud)
            scoring_seconds += time.perf_counter() - t0
            obj_scores.append(result.object_score)
            obj_labels.append(int(label))
            n_points += len(result.point_scores)
            if mask is None:
                notices.append("missing mask: point-level metrics skipped for a sample")
            else:
                point_scores.append(result.point_scores)
                point_labels.append(np.asarray(mask))
                if pool_points == "sample":
                    per_sample_p.append((result.point_scores, np.asarray(mask)))
        total_samples += len(items)

        def _try(fn, s, l, name):
            try:
                return fn(s, l)
            except SingleClassError as exc:
                notices.append(f"{name} skipped: {exc}")
                return None

        o_roc = _try(auroc, obj_scores, obj_labels, "o_auroc")
        o_pr = _try(aupr, obj_scores, obj_labels, "o_aupr")
        p_roc = p_pr = None
        if point_scores:
            if pool_points == "category":
                ps = np.concatenate(point_scores)
                pl = np.concatenate(point_labels)
                p_roc = _try(auroc, ps, pl, "p_auroc")
                p_pr = _try(aupr, ps, pl, "p_aupr")
            else:
                rocs, prs = [], []
                for ps, pl in per_sample_p:
                    r = _try(auroc, ps, pl, "p_auroc")
                    p = _try(aupr, ps, pl, "p_aupr")
                    if r is not None:
                        rocs.append(r)
                    if p is not None:
                        prs.append(p)
                p_roc = float(np.mean(rocs)) if rocs else None
                p_pr = float(np.mean(prs)) if prs else None
        per_category.append(CategoryResult(
            category, o_roc, p_roc, o_pr, p_pr, len(items), n_points, notices
        ))
    fps = total_samples / scoring_seconds if scoring_seconds > 0 else float("inf")
    return EvalResult(per_category, fps, total_samples)


def network_scorer(net):
    """Bind a network into the scorer signature used by evaluate()."""
    return lambda cloud: score_cloud(net, cloud)
