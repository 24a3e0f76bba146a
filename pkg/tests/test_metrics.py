import numpy as np
import pytest

from cfad.geometry import PointCloud
from cfad.metrics import (
    SingleClassError,
    aupr,
    auroc,
    evaluate,
    mean_rank,
)
from cfad.network import ForcePrediction
from cfad.scoring import ScoreResult


def brute_force_auroc(scores, labels):
    scores, labels = np.asarray(scores, float), np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def brute_force_aupr(scores, labels):
    scores, labels = np.asarray(scores, float), np.asarray(labels)
    n_pos = labels.sum()
    thresholds = np.unique(scores)[::-1]
    area, prev_recall = 0.0, 0.0
    for t in thresholds:
        sel = scores >= t
        tp = int((labels[sel] == 1).sum())
        precision = tp / sel.sum()
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_tie_half(self):
        assert auroc([0.5, 0.5], [1, 0]) == 0.5

    def test_pair_counting(self):
        assert auroc([0.2, 0.4, 0.35, 0.8], [0, 1, 0, 1]) == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            auroc([0.1, 0.2], [1, 1])

    def test_monotone_invariance(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=40)
        y = rng.integers(0, 2, 40)
        if y.max() == y.min():
            y[0] = 1 - y[0]
        assert auroc(np.exp(s), y) == pytest.approx(auroc(s, y), abs=1e-12)

    def test_complement(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=30)           # continuous, tie-free
        y = np.array([0, 1] * 15)
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


class TestAupr:
    def test_perfect(self):
        assert aupr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_all_tied_prevalence(self):
        assert aupr([0.5] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(0.3)

    def test_no_positive_rejected(self):
        with pytest.raises(SingleClassError):
            aupr([0.1, 0.2], [0, 0])

    def test_sweep_oracle_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = rng.integers(5, 50)
            s = np.round(rng.normal(size=n), 1)  # induce ties
            y = rng.integers(0, 2, n)
            if y.sum() == 0:
                y[0] = 1
            assert aupr(s, y) == pytest.approx(brute_force_aupr(s, y), abs=1e-9)


class TestOracleEquivalence:
    def test_200_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(4, 65))
            scores = np.round(rng.normal(size=n), 1)
            labels = rng.integers(0, 2, n)
            if labels.max() == 0:
                labels[0] = 1
            if labels.min() == 1:
                labels[-1] = 0
            assert auroc(scores, labels) == pytest.approx(
                brute_force_auroc(scores, labels), abs=1e-9
            )
            assert aupr(scores, labels) == pytest.approx(
                brute_force_aupr(scores, labels), abs=1e-9
            )


class TestMeanRank:
    def test_dominant_method(self):
        table = np.array([[0.9, 0.8, 0.7], [0.5, 0.4, 0.3]])
        np.testing.assert_allclose(mean_rank(table), [1.0, 2.0])

    def test_tied_average_rank(self):
        table = np.array([[0.5, 0.9], [0.5, 0.1]])
        np.testing.assert_allclose(mean_rank(table), [(1.5 + 1) / 2, (1.5 + 2) / 2])

    def test_brute_force_random(self):
        rng = np.random.default_rng(4)
        table = rng.normal(size=(3, 2))
        expected = np.zeros(3)
        for c in range(2):
            order = np.argsort(-table[:, c])
            ranks = np.empty(3)
            ranks[order] = np.arange(1, 4)
            expected += ranks
        np.testing.assert_allclose(mean_rank(table), expected / 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_rank(np.zeros((0, 0)))


def synthetic_test_set(seed=0, n_points=32):
    """Two categories of labeled clouds with masks."""
    rng = np.random.default_rng(seed)
    test_set = {}
    for cat in ("a", "b"):
        items = []
        for i in range(6):
            pts = rng.normal(size=(n_points, 3))
            mask = np.zeros(n_points, dtype=int)
            label = i % 2
            if label:
                mask[rng.choice(n_points, 5, replace=False)] = 1
            items.append((PointCloud(pts, point_labels=mask), label, mask))
        test_set[cat] = items
    return test_set


def oracle_scorer(cloud):
    scores = cloud.point_labels.astype(float)
    zeros = np.zeros((len(cloud), 3))
    return ScoreResult(scores, float(scores.max()), ForcePrediction(zeros, zeros))


def anti_oracle_scorer(cloud):
    scores = 1.0 - cloud.point_labels.astype(float)
    zeros = np.zeros((len(cloud), 3))
    obj = 1.0 - float(cloud.point_labels.max())
    return ScoreResult(scores, obj, ForcePrediction(zeros, zeros))


class TestEvaluate:
    def test_oracle_perfect(self):
        result = evaluate(oracle_scorer, synthetic_test_set())
        assert result.o_auroc == 1.0
        assert result.p_auroc == 1.0
        assert result.o_aupr == pytest.approx(1.0)
        assert result.p_aupr == pytest.approx(1.0)
        assert result.fps > 0

    def test_anti_oracle_zero(self):
        result = evaluate(anti_oracle_scorer, synthetic_test_set(seed=1))
        assert result.o_auroc == 0.0
        assert result.p_auroc == 0.0

    def test_missing_masks_skip_point_level(self):
        test_set = synthetic_test_set(seed=2)
        test_set["a"] = [(c, l, None) for c, l, _ in test_set["a"]]
        result = evaluate(oracle_scorer_obj, test_set)
        cat_a = next(c for c in result.per_category if c.category == "a")
        assert cat_a.p_auroc is None
        assert any("missing mask" in n for n in cat_a.notices)

    def test_single_class_category_skipped_with_notice(self):
        test_set = synthetic_test_set(seed=3)
        test_set["a"] = [(c, 1, m) for c, _, m in test_set["a"]]
        result = evaluate(oracle_scorer_obj, test_set)
        cat_a = next(c for c in result.per_category if c.category == "a")
        assert cat_a.o_auroc is None
        assert any("o_auroc skipped" in n for n in cat_a.notices)

    def test_csv_export(self, tmp_path):
        result = evaluate(oracle_scorer, synthetic_test_set(seed=4))
        path = tmp_path / "metrics.csv"
        result.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("category,")
        assert lines[-1].startswith("AGGREGATE,")
        assert len(lines) == 1 + 2 + 1


def oracle_scorer_obj(cloud):
    labels = cloud.point_labels
    scores = labels.astype(float) if labels is not None else np.zeros(len(cloud))
    zeros = np.zeros((len(cloud), 3))
    return ScoreResult(scores, float(scores.max()), ForcePrediction(zeros, zeros))
