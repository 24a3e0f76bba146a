"""Inference scoring, cloud restoration, and the two-stage quality-control cascade.

Point score = L2 norm of the resultant corrective force; object score = max
point score. HQC screens all samples with the fast pruned model, declares the
lowest-scoring fraction b normal, and rescores the rest with the full model.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from cfad.geometry import PointCloud
from cfad.network import CfpNet, ForcePrediction


@dataclass
class ScoreResult:
    point_scores: np.ndarray
    object_score: float
    prediction: ForcePrediction


@dataclass
class HqcConfig:
    b: float = 0.25

    def validate(self):
        if not (0 < self.b < 1):
            raise ValueError(f"b must be in (0, 1), got {self.b}")


@dataclass
class HqcRecord:
    sample_id: int
    pruned_score: float
    stage: str                                # "bypassed_normal" or "rescored"
    final_object_score: float
    final_point_scores: np.ndarray | None = None
    pruned_point_scores: np.ndarray | None = None


@dataclass
class HqcReport:
    records: list[HqcRecord]
    b: float
    bypass_count: int
    stage1_seconds: float
    stage2_seconds: float

    @property
    def n_samples(self) -> int:
        return len(self.records)

    @property
    def total_seconds(self) -> float:
        return self.stage1_seconds + self.stage2_seconds

    @property
    def fps(self) -> float:
        return self.n_samples / self.total_seconds

    def summary(self) -> dict:
        return {
            "b": self.b,
            "n_samples": self.n_samples,
            "bypass_count": self.bypass_count,
            "stage1_seconds": self.stage1_seconds,
            "stage2_seconds": self.stage2_seconds,
            "effective_fps": self.fps,
        }


def score_prediction(prediction: ForcePrediction) -> ScoreResult:
    point_scores = np.linalg.norm(prediction.resultant, axis=1)
    return ScoreResult(point_scores, float(point_scores.max()), prediction)


def score_cloud(net: CfpNet, cloud: PointCloud) -> ScoreResult:
    return score_prediction(net.predict(cloud))


def restore(cloud: PointCloud, prediction: ForcePrediction) -> PointCloud:
    """Apply the corrective field additively; a perfect model returns the clean cloud."""
    if prediction.resultant.shape != cloud.points.shape:
        raise ValueError(
            f"shape mismatch: forces {prediction.resultant.shape} vs points {cloud.points.shape}"
        )
    return PointCloud(cloud.points + prediction.resultant)


def hqc_run(samples: list[PointCloud], pruned_net: CfpNet, full_net: CfpNet,
            cfg: HqcConfig | None = None) -> HqcReport:
    """Two-stage screening: pruned model everywhere, full model on survivors.

    The floor(b*N) samples with the lowest pruned object scores (ascending,
    ties broken by sample id) are bypassed as normal and keep their pruned
    scores; all others get full-model point and object scores, identical to a
    standalone full-model evaluation.
    """
    cfg = cfg or HqcConfig()
    cfg.validate()
    if not samples:
        raise ValueError("no samples to screen")
    n = len(samples)

    t0 = time.perf_counter()
    stage1 = [score_cloud(pruned_net, c) for c in samples]
    stage1_seconds = time.perf_counter() - t0

    n_bypass = int(np.floor(cfg.b * n))
    if n_bypass < 1:
        warnings.warn(f"b*N = {cfg.b * n:.3g} < 1: no samples bypassed, all rescored")
        n_bypass = 0
    order = sorted(range(n), key=lambda i: (stage1[i].object_score, i))
    bypassed = set(order[:n_bypass])

    t1 = time.perf_counter()
    records = []
    for i in range(n):
        s1 = stage1[i]
        if i in bypassed:
            records.append(HqcRecord(
                sample_id=i,
                pruned_score=s1.object_score,
                stage="bypassed_normal",
                final_object_score=s1.object_score,
                pruned_point_scores=s1.point_scores,
            ))
        else:
            s2 = score_cloud(full_net, samples[i])
            records.append(HqcRecord(
                sample_id=i,
                pruned_score=s1.object_score,
                stage="rescored",
                final_object_score=s2.object_score,
                final_point_scores=s2.point_scores,
                pruned_point_scores=s1.point_scores,
            ))
    stage2_seconds = time.perf_counter() - t1
    return HqcReport(records, cfg.b, n_bypass, stage1_seconds, stage2_seconds)
