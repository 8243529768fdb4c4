import numpy as np
import pytest

from osrkit import model as M
from osrkit import openset as O
from osrkit import tensor as T
from osrkit.errors import ContractError, ProtocolError


def head_from(weight, bias):
    return O.DetectionHeadParams(weight=T.Tensor(weight, requires_grad=True),
                                 bias=T.Tensor(bias, requires_grad=True))


class TestDetectEmbed:
    def test_identity_head_passes_through(self, rng):
        head = head_from(np.eye(4), np.zeros(4))
        f = rng.normal(size=4)
        assert np.allclose(O.detect_embed(f, head).data, f)

    def test_zero_feature_yields_bias(self, rng):
        b = rng.normal(size=4)
        head = head_from(rng.normal(size=(4, 4)), b)
        assert np.allclose(O.detect_embed(np.zeros(4), head).data, b)

    def test_linearity_without_bias(self, rng):
        head = head_from(rng.normal(size=(4, 4)), np.zeros(4))
        f1, f2 = rng.normal(size=4), rng.normal(size=4)
        combo = O.detect_embed(2.0 * f1 - 3.0 * f2, head).data
        parts = 2.0 * O.detect_embed(f1, head).data - 3.0 * O.detect_embed(f2, head).data
        assert np.allclose(combo, parts)


class TestAnchorCenters:
    def test_mean_of_two(self):
        head = head_from(np.eye(2), np.zeros(2))
        feats = np.array([[1.0, 1.0], [3.0, 3.0]])
        centers = O.anchor_centers_from_features(feats, np.array([0, 0]), head, 1)
        assert np.allclose(centers.centers, [[2.0, 2.0]])

    def test_singleton_class(self, rng):
        head = head_from(np.eye(3), np.zeros(3))
        f = rng.normal(size=(1, 3))
        centers = O.anchor_centers_from_features(f, np.array([0]), head, 1)
        assert np.allclose(centers.centers[0], f[0])

    def test_empty_class_names_the_class(self, rng):
        head = head_from(np.eye(2), np.zeros(2))
        with pytest.raises(ProtocolError, match="class 1"):
            O.anchor_centers_from_features(rng.normal(size=(3, 2)),
                                           np.array([0, 0, 2]), head, 3)

    def test_deterministic_recompute(self, rng):
        cfg = M.ModelConfig(28, 28, 1, 14, 8, 1, 2, 2)
        vit = M.init_vit(cfg, seed=1)
        head = O.init_detection_head(cfg, seed=2)
        images = rng.random((10, 28, 28, 1)).astype(np.float32)
        labels = np.array([0, 1] * 5)
        first = O.anchor_centers(images, labels, vit, cfg, head, batch_size=4)
        second = O.anchor_centers(images, labels, vit, cfg, head, batch_size=4)
        assert np.array_equal(first.centers, second.centers)
        assert first.frozen

    def test_centers_are_read_only(self):
        centers = O.ClassCenters(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            centers.centers[0, 0] = 1.0


class TestCenterLoss:
    def test_zero_at_centers(self):
        centers = O.ClassCenters(np.array([[1.0, 2.0], [3.0, 4.0]]))
        reps = T.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert O.center_loss(reps, np.array([0, 1]), centers).item() == 0.0

    def test_single_sample_squared_norm(self):
        centers = O.ClassCenters(np.zeros((1, 2)))
        reps = T.constant(np.array([[3.0, 0.0]]))
        assert O.center_loss(reps, np.array([0]), centers).item() == 9.0

    def test_matches_brute_force_on_random_batches(self, rng):
        for _ in range(20):
            k, d, n = 4, 6, 12
            centers = O.ClassCenters(rng.normal(size=(k, d)))
            reps = rng.normal(size=(n, d))
            labels = rng.integers(k, size=n)
            got = O.center_loss(T.constant(reps), labels, centers).item()
            want = float(np.mean([np.sum((reps[i] - centers.centers[labels[i]]) ** 2)
                                  for i in range(n)]))
            assert got == pytest.approx(want, rel=1e-12)

    def test_out_of_range_label_rejected(self, rng):
        centers = O.ClassCenters(rng.normal(size=(2, 3)))
        with pytest.raises(ContractError):
            O.center_loss(T.constant(rng.normal(size=(1, 3))), np.array([2]), centers)

    def test_gradient_reaches_reps_not_centers(self, rng):
        centers = O.ClassCenters(rng.normal(size=(2, 3)))
        before = centers.centers.copy()
        reps = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 1, 0, 1])
        O.center_loss(reps, labels, centers).backward()
        want = 2.0 * (reps.data - centers.centers[labels]) / 4.0
        assert np.allclose(reps.grad, want)
        assert np.array_equal(centers.centers, before)


class TestScores:
    def test_anomaly_zero_at_center(self, rng):
        centers = O.ClassCenters(rng.normal(size=(3, 4)))
        assert O.anomaly_score(centers.centers[1], 1, centers) == 0.0

    def test_anomaly_unit_offsets(self):
        centers = O.ClassCenters(np.zeros((1, 4)))
        assert O.anomaly_score(np.ones(4), 0, centers) == 4.0

    def test_anomaly_nonnegative(self, rng):
        centers = O.ClassCenters(rng.normal(size=(3, 4)))
        reps = rng.normal(size=(20, 4))
        preds = rng.integers(3, size=20)
        assert np.all(O.anomaly_score(reps, preds, centers) >= 0)

    def test_nearest_zero_at_any_center(self, rng):
        centers = O.ClassCenters(rng.normal(size=(4, 5)))
        for k in range(4):
            assert O.nearest_center_score(centers.centers[k], centers) == pytest.approx(0.0)

    def test_nearest_bounded_by_anomaly(self, rng):
        centers = O.ClassCenters(rng.normal(size=(5, 4)))
        reps = rng.normal(size=(30, 4))
        preds = rng.integers(5, size=30)
        near = O.nearest_center_score(reps, centers)
        anom = O.anomaly_score(reps, preds, centers)
        assert np.all(near <= anom + 1e-12)

    def test_nearest_matches_exhaustive_scan(self, rng):
        for _ in range(25):
            centers = O.ClassCenters(rng.normal(size=(6, 3)))
            rep = rng.normal(size=3)
            want = min(np.sum((rep - c) ** 2) for c in centers.centers)
            assert O.nearest_center_score(rep, centers) == pytest.approx(want, rel=1e-12)

    def test_equality_iff_prediction_attains_minimum(self, rng):
        centers = O.ClassCenters(rng.normal(size=(4, 3)))
        rep = rng.normal(size=3)
        per_class = np.array([np.sum((rep - c) ** 2) for c in centers.centers])
        best = int(per_class.argmin())
        assert O.anomaly_score(rep, best, centers) == pytest.approx(
            O.nearest_center_score(rep, centers))
        worst = int(per_class.argmax())
        if per_class[worst] > per_class[best]:
            assert O.anomaly_score(rep, worst, centers) > O.nearest_center_score(rep, centers)


class TestDecide:
    def setup_method(self):
        self.cfg = M.ModelConfig(28, 28, 1, 14, 8, 1, 2, 3)
        self.vit = M.init_vit(self.cfg, seed=7)
        self.head = O.init_detection_head(self.cfg, seed=8)
        rng = np.random.default_rng(9)
        self.image = rng.random((28, 28, 1)).astype(np.float32)
        feats = O.extract_features(self.image[None], self.vit, self.cfg)
        self.centers = O.anchor_centers_from_features(
            np.repeat(feats, 3, axis=0), np.array([0, 1, 2]), self.head, 3)

    def test_boundary_score_accepted(self):
        probe = O.decide(self.image, self.vit, self.cfg, self.head, self.centers, tau=1e9)
        exact = O.decide(self.image, self.vit, self.cfg, self.head, self.centers,
                         tau=probe.score)
        assert exact.verdict == "known" and exact.label == probe.label

    def test_huge_threshold_accepts(self):
        decision = O.decide(self.image, self.vit, self.cfg, self.head, self.centers, tau=1e12)
        assert decision.verdict == "known" and decision.label is not None

    def test_zero_threshold_rejects_off_center(self, rng):
        other = rng.random((28, 28, 1)).astype(np.float32)
        decision = O.decide(other, self.vit, self.cfg, self.head, self.centers, tau=0.0)
        if decision.score > 0:
            assert decision.verdict == "unknown" and decision.label is None

    def test_inconsistent_decision_rejected(self):
        with pytest.raises(ContractError):
            O.OsrDecision(verdict="known", label=1, score=2.0, threshold=1.0)

    def test_rejections_monotone_in_threshold(self, rng):
        scores = rng.random(200) * 10
        taus = np.linspace(0, 10, 100)
        rejections = [(scores > tau).sum() for tau in taus]
        assert all(a >= b for a, b in zip(rejections, rejections[1:]))


class TestCalibrateThreshold:
    def test_q1_returns_max(self):
        assert O.calibrate_threshold([1, 2, 3, 4, 5], 1.0) == 5.0

    def test_constant_scores(self):
        for q in (0.1, 0.5, 0.95, 1.0):
            assert O.calibrate_threshold([7.0] * 9, q) == 7.0

    def test_linear_interpolation_quantile(self):
        # independent oracle: position (n-1)*q between order statistics
        scores = np.arange(100, dtype=float)
        np.random.default_rng(0).shuffle(scores)
        got = O.calibrate_threshold(scores, 0.95)
        pos = 99 * 0.95
        lo, hi = int(np.floor(pos)), int(np.ceil(pos))
        ordered = np.sort(scores)
        want = ordered[lo] + (pos - lo) * (ordered[hi] - ordered[lo])
        assert got == pytest.approx(94.05) and got == pytest.approx(want)

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            O.calibrate_threshold([])

    def test_bad_quantile_rejected(self):
        with pytest.raises(ContractError):
            O.calibrate_threshold([1.0], 0.0)
