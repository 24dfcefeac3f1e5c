from itertools import permutations

import numpy as np
import pytest
import torch

from mvrepose.domain import ARMap, FeatureBundle
from mvrepose.exceptions import ShapeMismatchError
from mvrepose.fusion import fuse, interp_armap, interp_weights, permute_views, split_bundle, stack_bundles
from mvrepose.mvf import normalize


def random_bundle(generator, batch=2, dtype=torch.float32):
    texture = (torch.randn(batch, 4, 8, 8, generator=generator, dtype=dtype),
               torch.randn(batch, 5, 4, 4, generator=generator, dtype=dtype))
    return FeatureBundle(texture, torch.randn(batch, 3, 8, 8, generator=generator, dtype=dtype))


def random_weights(generator, batch=2, size=8, dtype=torch.float32):
    return normalize(torch.randn(batch, 3, size, size, generator=generator, dtype=dtype) * 3)


def assert_bundle_close(a, b, atol=1e-6):
    for ta, tb in zip(a.texture, b.texture):
        assert torch.allclose(ta, tb, atol=atol)
    assert torch.allclose(a.pose, b.pose, atol=atol)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


class TestInterp:
    def test_same_size_is_identity(self, generator):
        weights = random_weights(generator)
        assert interp_weights(weights, (8, 8)) is weights

    def test_resampled_weights_stay_on_simplex(self, generator):
        weights = random_weights(generator)
        for size in [(4, 4), (2, 2), (16, 16), (1, 1)]:
            out = interp_weights(weights, size)
            assert out.shape[-2:] == size
            assert torch.allclose(out.sum(dim=1), torch.ones(2, *size), atol=1e-6)
            assert out.min() >= 0

    def test_corner_values_are_kept(self, generator):
        weights = random_weights(generator)
        out = interp_weights(weights, (16, 16))
        assert torch.allclose(out[..., 0, 0], weights[..., 0, 0], atol=1e-6)
        assert torch.allclose(out[..., -1, -1], weights[..., -1, -1], atol=1e-6)

    def test_interp_armap(self):
        grid = np.random.default_rng(0).dirichlet(np.ones(3), size=(8, 8))
        armap = ARMap(grid)
        assert interp_armap(armap, (8, 8)) is armap
        assert interp_armap(armap, (4, 4)).grid.shape == (4, 4, 3)

    def test_empty_target(self, generator):
        with pytest.raises(ShapeMismatchError):
            interp_weights(random_weights(generator), (0, 4))


class TestFuseAlgebra:
    def test_one_hot_selects_view(self, generator):
        bundles = [random_bundle(generator) for _ in range(3)]
        for view in range(3):
            weights = torch.zeros(2, 3, 8, 8)
            weights[:, view] = 1.0
            assert_bundle_close(fuse(bundles, weights), bundles[view])

    def test_identical_views_give_the_view(self, generator):
        bundle = random_bundle(generator)
        assert_bundle_close(fuse([bundle] * 3, random_weights(generator)), bundle, atol=1e-5)

    def test_convex_hull(self, generator):
        for _ in range(100):
            bundles = [random_bundle(generator, batch=1) for _ in range(3)]
            fused = fuse(bundles, random_weights(generator, batch=1))
            for level, tensor in enumerate(fused.texture):
                stacked = torch.stack([b.texture[level] for b in bundles])
                assert (tensor >= stacked.min(0).values - 1e-6).all()
                assert (tensor <= stacked.max(0).values + 1e-6).all()

    def test_permutation_consistency(self, generator):
        bundles = [random_bundle(generator) for _ in range(3)]
        weights = random_weights(generator)
        reference = fuse(bundles, weights)
        for order in permutations(range(3)):
            permuted, permuted_weights = permute_views(bundles, weights, order)
            assert_bundle_close(fuse(permuted, permuted_weights), reference)

    def test_linearity(self, generator):
        xs = [random_bundle(generator) for _ in range(3)]
        ys = [random_bundle(generator) for _ in range(3)]
        weights = random_weights(generator)
        a, b = 0.7, -1.3
        combined = [FeatureBundle(tuple(a * tx + b * ty for tx, ty in zip(x.texture, y.texture)),
                                  a * x.pose + b * y.pose) for x, y in zip(xs, ys)]
        fx, fy = fuse(xs, weights), fuse(ys, weights)
        expected = FeatureBundle(tuple(a * tx + b * ty for tx, ty in zip(fx.texture, fy.texture)),
                                 a * fx.pose + b * fy.pose)
        assert_bundle_close(fuse(combined, weights), expected, atol=1e-5)

    def test_accepts_armap(self, generator):
        bundles = [random_bundle(generator, batch=1) for _ in range(3)]
        weights = random_weights(generator, batch=1)
        fused = fuse(bundles, ARMap.from_tensor(weights))
        assert_bundle_close(fused, fuse(bundles, weights), atol=1e-6)


class TestFuseErrors:
    def test_wrong_view_count(self, generator):
        with pytest.raises(ShapeMismatchError):
            fuse([random_bundle(generator)] * 2, random_weights(generator))

    def test_mismatched_bundles(self, generator):
        odd = random_bundle(generator, batch=1)
        with pytest.raises(ShapeMismatchError):
            fuse([random_bundle(generator), random_bundle(generator), odd], random_weights(generator))

    def test_armap_resolution_must_match_pose(self, generator):
        bundles = [random_bundle(generator) for _ in range(3)]
        with pytest.raises(ShapeMismatchError):
            fuse(bundles, random_weights(generator, size=4))


class TestFuseGradient:
    def test_gradcheck(self, generator):
        bundles = [random_bundle(generator, batch=1, dtype=torch.float64) for _ in range(3)]
        textures = [b.texture[1].clone().requires_grad_(True) for b in bundles]
        logits = torch.randn(1, 3, 8, 8, generator=generator, dtype=torch.float64, requires_grad=True)

        def fused_level(t0, t1, t2, raw):
            parts = [FeatureBundle((b.texture[0], t), b.pose) for b, t in zip(bundles, (t0, t1, t2))]
            out = fuse(parts, normalize(raw))
            return out.texture[1], out.pose

        assert torch.autograd.gradcheck(fused_level, (*textures, logits), eps=1e-6, atol=1e-4)


class TestBundleBatching:
    def test_stack_then_split(self, generator):
        bundles = [random_bundle(generator) for _ in range(3)]
        for original, part in zip(bundles, split_bundle(stack_bundles(bundles), 3)):
            assert_bundle_close(original, part, atol=0.0)


class TestNormalize:
    def test_simplex_under_extreme_logits(self, generator):
        logits = (torch.rand(1000, 3, 4, 4, generator=generator) * 2 - 1) * 1e4
        weights = normalize(logits)
        assert torch.isfinite(weights).all()
        assert (weights.sum(dim=1) - 1).abs().max() <= 1e-6
        assert weights.min() >= 0 and weights.max() <= 1

    def test_known_values(self):
        equal = normalize(torch.zeros(1, 3, 1, 1))
        assert torch.allclose(equal.flatten(), torch.full((3,), 1 / 3))
        skewed = normalize(torch.tensor([0.0, float(np.log(2.0)), 0.0]).reshape(1, 3, 1, 1))
        assert torch.allclose(skewed.flatten(), torch.tensor([0.25, 0.5, 0.25]))

    def test_shift_invariant(self, generator):
        logits = torch.randn(2, 3, 4, 4, generator=generator)
        assert torch.allclose(normalize(logits), normalize(logits + 123.0), atol=1e-6)
