import json
import math

import numpy as np
import pytest

from mvrepose.domain import ImageGrid, KeypointSet, SourceView, ViewTuple
from mvrepose.exceptions import MetricError, ShapeMismatchError
from mvrepose.losses import RandomConvExtractor
from mvrepose.metrics import (FeatureStatistics, MetricReport, closest_view, feature_distance, fid, oks, psnr,
                              rigid_align, ssim)
from mvrepose.preprocess import render_pose_map


def constant(value, size=16):
    return ImageGrid(np.full((size, size, 3), value))


def keypoints(xy):
    xy = np.asarray(xy, dtype=np.float64)
    return KeypointSet(xy, np.ones(len(xy), dtype=bool))


def rotate(xy, angle, shift):
    c, s = math.cos(angle), math.sin(angle)
    return np.asarray(xy) @ np.array([[c, -s], [s, c]]).T + np.asarray(shift)


class TestPsnr:
    def test_identical_is_infinite(self):
        assert psnr(constant(0.3), constant(0.3)) == math.inf

    def test_closed_forms(self):
        assert psnr(constant(0.0), constant(0.1)) == pytest.approx(20.0, abs=0.01)
        assert psnr(constant(0.0), constant(0.5)) == pytest.approx(6.02, abs=0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(constant(0.0, 16), constant(0.0, 24))


class TestSsim:
    def test_identical(self, rng):
        image = ImageGrid(rng.uniform(size=(16, 16, 3)))
        assert ssim(image, image) == pytest.approx(1.0)

    def test_constant_images(self):
        c1 = 0.01 ** 2
        expected = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
        assert ssim(constant(0.25), constant(0.75)) == pytest.approx(expected, abs=1e-6)

    def test_tiny_noise(self, rng):
        values = rng.uniform(0.1, 0.9, size=(32, 32, 3))
        noisy = values + rng.normal(0.0, 1e-4, size=values.shape)
        assert ssim(ImageGrid(values), ImageGrid(noisy)) > 0.99

    def test_image_smaller_than_window(self):
        with pytest.raises(MetricError):
            ssim(constant(0.5, 8), constant(0.5, 8))


class TestFeatureDistance:
    def test_identity_and_symmetry(self, rng):
        extractor = RandomConvExtractor(levels=2)
        a, b = ImageGrid(rng.uniform(size=(16, 16, 3))), ImageGrid(rng.uniform(size=(16, 16, 3)))
        assert feature_distance(a, a, extractor) == 0.0
        assert feature_distance(a, b, extractor) == pytest.approx(feature_distance(b, a, extractor))
        assert feature_distance(a, b, extractor) > 0.0

    def test_matches_recomputation(self, rng):
        extractor = RandomConvExtractor(levels=2)
        a, b = ImageGrid(rng.uniform(size=(16, 16, 3))), ImageGrid(rng.uniform(size=(16, 16, 3)))
        levels = []
        for fa, fb in zip(extractor(a.to_tensor()[None]), extractor(b.to_tensor()[None])):
            fa = fa[0].numpy().astype(np.float64)
            fb = fb[0].numpy().astype(np.float64)
            na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-10)
            nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-10)
            levels.append(((na - nb) ** 2).sum(axis=0).mean())
        assert feature_distance(a, b, extractor) == pytest.approx(np.mean(levels), abs=1e-5)


class TestFid:
    def test_identical(self, rng):
        x = rng.normal(size=(50, 4))
        stats = (x.mean(0), np.cov(x, rowvar=False))
        assert fid(stats, stats) == pytest.approx(0.0, abs=1e-6)

    def test_mean_shift(self):
        sigma = np.diag([1.0, 2.0, 0.5])
        assert fid((np.zeros(3), sigma), (np.eye(3)[0], sigma)) == pytest.approx(1.0, abs=1e-6)

    def test_diagonal_closed_form(self, rng):
        for _ in range(50):
            d = int(rng.integers(1, 8))
            mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
            s1, s2 = rng.uniform(0.0, 3.0, size=d), rng.uniform(0.0, 3.0, size=d)
            expected = ((mu1 - mu2) ** 2).sum() + ((np.sqrt(s1) - np.sqrt(s2)) ** 2).sum()
            assert fid((mu1, np.diag(s1)), (mu2, np.diag(s2))) == pytest.approx(expected, abs=1e-6)

    def test_non_negative_on_random_psd(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
            assert fid((rng.normal(size=5), a @ a.T), (rng.normal(size=5), b @ b.T)) >= -1e-6

    def test_errors(self):
        with pytest.raises(MetricError):
            fid((np.zeros(2), np.eye(2)), (np.zeros(3), np.eye(3)))
        with pytest.raises(MetricError):
            fid((np.zeros(2), np.diag([1.0, -1.0])), (np.zeros(2), np.eye(2)))


class TestFeatureStatistics:
    def test_merge_equals_single_pass(self, rng):
        x = rng.normal(size=(40, 3))
        merged = FeatureStatistics(3).update(x[:15]).merge(FeatureStatistics(3).update(x[15:]))
        assert np.allclose(merged.mean, x.mean(0))
        assert np.allclose(merged.covariance, np.cov(x, rowvar=False))

    def test_needs_two_samples(self):
        with pytest.raises(MetricError):
            FeatureStatistics(2).update(np.ones((1, 2))).covariance


class TestOks:
    xy = [[10.0, 10.0], [30.0, 12.0], [20.0, 40.0], [5.0, 25.0]]

    def test_identical(self):
        assert oks(keypoints(self.xy), keypoints(self.xy), kappa=2.0) == pytest.approx(1.0)

    def test_rigid_motion_is_removed(self):
        moved = rotate(self.xy, 0.7, (5.0, -3.0))
        assert oks(keypoints(self.xy), keypoints(moved), kappa=2.0) == pytest.approx(1.0, abs=1e-9)

    def test_single_displaced_joint(self):
        kappa, scale = 2.0, 1.5
        displaced = np.array(self.xy)
        displaced[0, 0] += scale * kappa
        value = oks(keypoints(self.xy), keypoints(displaced), scale=scale, kappa=kappa, align=False)
        assert value == pytest.approx((math.exp(-0.5) + 3.0) / 4.0, abs=1e-9)

    def test_invariant_to_common_rigid_transform(self, rng):
        p = rng.uniform(0, 64, size=(6, 2))
        q = p + rng.normal(0, 3, size=p.shape)
        before = oks(keypoints(p), keypoints(q), kappa=4.0)
        after = oks(keypoints(rotate(p, 1.1, (7, 2))), keypoints(rotate(q, 1.1, (7, 2))), kappa=4.0)
        assert before == pytest.approx(after, abs=1e-9)

    def test_scale_alignment(self):
        scaled = np.array(self.xy) * 1.5 + 4.0
        assert oks(keypoints(self.xy), keypoints(scaled), kappa=2.0, allow_scale=True) == pytest.approx(1.0)
        assert oks(keypoints(self.xy), keypoints(scaled), kappa=2.0) < 1.0

    def test_needs_two_common_joints(self):
        p = KeypointSet(np.zeros((3, 2)), np.array([True, False, False]))
        with pytest.raises(MetricError):
            oks(p, p, kappa=1.0)

    def test_default_kappa_from_image(self):
        displaced = np.array(self.xy)
        displaced[0, 0] += 0.1 * math.hypot(64, 64)
        value = oks(keypoints(self.xy), keypoints(displaced), image_shape=(64, 64), align=False)
        assert value == pytest.approx((math.exp(-0.5) + 3.0) / 4.0, abs=1e-9)

    def test_rigid_align_reflection_guard(self, rng):
        p = rng.uniform(size=(5, 2))
        mirrored = p * np.array([-1.0, 1.0])
        aligned = rigid_align(p, mirrored)
        assert np.isclose(np.linalg.norm(aligned - aligned.mean(0)), np.linalg.norm(p - p.mean(0)))


def source(xy, view_id):
    kp = keypoints(xy)
    return SourceView(ImageGrid(np.zeros((16, 16, 3))), kp, render_pose_map(kp, 16, 16, 1.0), view_id)


class TestClosestView:
    target = [[2.0, 2.0], [12.0, 3.0], [8.0, 14.0], [3.0, 9.0]]

    def _tuple(self, sources):
        kp = keypoints(self.target)
        return ViewTuple(tuple(sources), kp, render_pose_map(kp, 16, 16, 1.0))

    def test_exact_match_wins(self):
        far = [[1.0, 14.0], [2.0, 2.0], [14.0, 14.0], [8.0, 1.0]]
        near = (np.array(self.target) + [[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, 0.0]]).tolist()
        sources = [source(far, "a"), source(self.target, "b"), source(near, "c")]
        assert closest_view(self._tuple(sources)) == 1

    def test_ties_go_to_first(self):
        view = source([[1.0, 14.0], [2.0, 2.0], [14.0, 14.0], [8.0, 1.0]], "a")
        assert closest_view(self._tuple([view, view, view])) == 0

    def test_matches_brute_force(self, rng):
        candidates = [rng.uniform(0, 15, size=(4, 2)) for _ in range(3)]
        sources = [source(c, str(i)) for i, c in enumerate(candidates)]
        scores = [oks(keypoints(c), keypoints(self.target), image_shape=(16, 16)) for c in candidates]
        assert closest_view(self._tuple(sources)) == int(np.argmax(scores))
        assert int(np.argmax(scores)) == int(np.argmax(np.square(scores)))


class TestMetricReport:
    def test_aggregates_are_means(self):
        report = MetricReport(fid_by_mode={"1": 2.5})
        report.add("1", "p0", "v0", ("v1", "v1", "v1"), l1=0.2, ssim=0.5, psnr=10.0, lpips=0.1)
        report.add("1", "p0", "v1", ("v0", "v0", "v0"), l1=0.4, ssim=0.7, psnr=12.0, lpips=0.3)
        report.add("3", "p0", "v0", ("v1", "v2", "v3"), l1=0.1, ssim=0.9, psnr=20.0, lpips=0.05)
        table = report.aggregates()
        assert list(table["mode"]) == ["1", "3"]
        assert report.aggregate("1", "l1") == pytest.approx(0.3)
        assert report.aggregate("1", "count") == 2
        assert report.aggregate("1", "fid") == 2.5
        assert math.isnan(report.aggregate("3", "fid"))
        assert report.records["sources"][0] == "v1,v1,v1"

    def test_save(self, tmp_path):
        report = MetricReport(note="desk")
        report.add("2", "p0", "v0", ("v1", "v2", "v1"), l1=0.2, ssim=0.5, psnr=10.0, lpips=0.1)
        path = report.save(tmp_path / "report.json")
        assert path.is_file()
        saved = json.loads(path.read_text())
        assert saved["note"] == "desk"
        assert saved["aggregates"][0]["mode"] == "2"
