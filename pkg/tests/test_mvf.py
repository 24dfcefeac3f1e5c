import numpy as np
import pytest
import torch

from mvrepose.domain import ARMap
from mvrepose.exceptions import ShapeMismatchError
from mvrepose.mvf import (MultiViewFusion, SwinBlock, rgb_visualize, shifted_window_mask, window_partition,
                          window_reverse)


def views(cfg, batch=2, seed=0):
    generator = torch.Generator().manual_seed(seed)
    size = cfg.image_size
    images = [torch.rand(batch, 3, size, size, generator=generator) for _ in range(3)]
    poses = [torch.rand(batch, cfg.num_joints, size, size, generator=generator) for _ in range(3)]
    return images, poses, torch.rand(batch, cfg.num_joints, size, size, generator=generator)


class TestWindows:
    def test_partition_layout(self):
        x = torch.arange(2 * 8 * 8 * 3, dtype=torch.float32).reshape(2, 8, 8, 3)
        windows = window_partition(x, 4)
        assert windows.shape == (8, 16, 3)
        assert torch.equal(windows[1, 0], x[0, 0, 4])
        assert torch.equal(window_reverse(windows, 4, 8, 8), x)

    def test_shift_mask_blocks_wrapped_regions(self):
        mask = shifted_window_mask(8, 8, 4, 2)
        assert mask.shape == (4, 16, 16)
        assert not mask[0].any()
        assert (mask[3] == -100.0).any()
        assert set(mask.unique().tolist()) == {0.0, -100.0}

    def test_single_window_block_skips_shift(self):
        block = SwinBlock(dim=8, heads=2, window=4, shifted=True)
        assert block(torch.rand(1, 4, 4, 8)).shape == (1, 4, 4, 8)

    def test_block_pads_to_window(self):
        block = SwinBlock(dim=8, heads=2, window=4, shifted=True)
        assert block(torch.rand(1, 6, 10, 8)).shape == (1, 6, 10, 8)


@pytest.mark.parametrize("arch", ["swin", "unet"])
class TestMultiViewFusion:
    def test_logit_shape_and_simplex(self, tiny_cfg, arch):
        cfg = tiny_cfg.with_overrides(mvf_arch=arch)
        mvf = MultiViewFusion(cfg)
        images, poses, target = views(cfg)
        logits = mvf.predict_logits(images, poses, target)
        assert logits.shape == (2, 3, cfg.armap_size, cfg.armap_size)
        weights = mvf(images, poses, target)
        assert torch.allclose(weights.sum(dim=1), torch.ones(2, cfg.armap_size, cfg.armap_size), atol=1e-6)

    def test_visibility_heads(self, tiny_cfg, arch):
        cfg = tiny_cfg.with_overrides(mvf_arch=arch)
        mvf = MultiViewFusion(cfg)
        images, poses, target = views(cfg)
        maps = mvf.visibility_maps(images[0], poses[0], target)
        assert maps.shape == (2, 3, 32, 32)
        assert ((maps > 0) & (maps < 1)).all()
        single = mvf.predict_visibility(images[0], poses[0], target)
        assert torch.equal(single, maps[:, :1])

    def test_rejects_bad_view_count(self, tiny_cfg, arch):
        mvf = MultiViewFusion(tiny_cfg.with_overrides(mvf_arch=arch))
        images, poses, target = views(tiny_cfg)
        with pytest.raises(ShapeMismatchError):
            mvf.predict_logits(images[:2], poses[:2], target)

    def test_rejects_mixed_resolution(self, tiny_cfg, arch):
        mvf = MultiViewFusion(tiny_cfg.with_overrides(mvf_arch=arch))
        images, poses, target = views(tiny_cfg)
        images[2] = torch.rand(2, 3, 16, 16)
        with pytest.raises(ShapeMismatchError):
            mvf.predict_logits(images, poses, target)


class TestRgbVisualize:
    def _armap(self):
        return ARMap(np.random.default_rng(0).dirichlet(np.ones(3), size=(16, 16)))

    def test_three_views_are_rgb(self):
        armap = self._armap()
        assert np.allclose(rgb_visualize(armap).values, armap.grid)

    def test_one_view_is_red(self):
        painted = rgb_visualize(self._armap(), used_views=1).values
        assert np.allclose(painted[..., 0], 1.0)
        assert not painted[..., 1:].any()

    def test_two_views_leave_blue_empty(self):
        painted = rgb_visualize(self._armap(), used_views=2).values
        assert not painted[..., 2].any()
        assert np.allclose(painted[..., :2].sum(axis=2), 1.0)
