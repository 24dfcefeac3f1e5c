import json

import numpy as np
import pytest

from mvrepose.domain import LABEL_BACKGROUND
from mvrepose.exceptions import DatasetError, DegeneratePoseError, InvalidImageError, InvalidPoseError
from mvrepose.preprocess import foreground_mask
from mvrepose.synthetic import (NUM_JOINTS, PoseSpec, build_dataset, generate_figure, ground_truth_visibility,
                                render_layers, render_view, sample_pose, visibility_between)


@pytest.fixture
def figure():
    return generate_figure(7)


class TestFigure:
    def test_deterministic_in_seed(self):
        assert generate_figure(3) == generate_figure(3)
        assert generate_figure(3) != generate_figure(4)

    def test_front_and_back_differ(self, figure):
        for _, front, back in figure.textures:
            assert np.abs(np.subtract(front.color_a, back.color_a)).mean() > 0.15


class TestPoseSpec:
    def test_rejects_angle_outside_limits(self):
        with pytest.raises(InvalidPoseError):
            PoseSpec.neutral().with_angles(r_knee=170.0)

    def test_rejects_zoom(self):
        with pytest.raises(InvalidPoseError):
            PoseSpec.neutral(zoom=3.0)

    def test_flipped_part_shows_other_face(self):
        pose = PoseSpec.neutral(facing="front", flipped_parts={"left_arm"})
        assert pose.face_of("left_arm") == "back"
        assert pose.face_of("torso") == "front"

    def test_sampled_poses_are_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            sample_pose(rng, flip_probability=0.5).validate()


class TestRenderView:
    def test_output_contract(self, figure):
        view = render_view(figure, PoseSpec.neutral(), 64, 64, view_id="v00", person_id="p0000")
        assert view.image.values.shape == (64, 64, 3)
        assert view.pose_map.grid.shape == (64, 64, NUM_JOINTS)
        assert set(np.unique(view.segmentation)) <= {0, 1, 2, 3}
        assert view.keypoints.visible.all()
        assert view.keypoints.within(64, 64)

    def test_deterministic(self, figure):
        pose = sample_pose(np.random.default_rng(1))
        a = render_layers(figure, pose, 32, 32)
        b = render_layers(figure, pose, 32, 32)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.part_map, b.part_map)

    def test_size_must_be_multiple_of_eight(self, figure):
        with pytest.raises(InvalidImageError):
            render_view(figure, PoseSpec.neutral(), 36, 36)

    def test_zero_length_limb(self, figure):
        with pytest.raises(DegeneratePoseError):
            render_view(figure, PoseSpec.neutral(zoom=0.5), 8, 8)

    def test_segmentation_covers_figure(self, figure):
        rendering = render_layers(figure, PoseSpec.neutral(), 32, 32)
        assert np.array_equal(rendering.segmentation != LABEL_BACKGROUND, rendering.part_map >= 0)


class TestGroundTruthVisibility:
    def test_same_pose_sees_whole_figure(self, figure):
        pose = PoseSpec.neutral()
        vis = ground_truth_visibility(figure, pose, pose, 32, 32)
        rendering = render_layers(figure, pose, 32, 32)
        assert vis.is_binary
        assert np.array_equal(vis.grid[..., 0] > 0, rendering.part_map >= 0)

    def test_front_source_sees_nothing_of_back_view(self, figure):
        front = PoseSpec.neutral(facing="front")
        back = PoseSpec.neutral(facing="back")
        assert not ground_truth_visibility(figure, front, back, 32, 32).grid.any()

    def test_flipped_arm_is_seen_from_behind(self, figure):
        source = PoseSpec.neutral(facing="back")
        target_rendering = render_layers(figure, PoseSpec.neutral(facing="front", flipped_parts={"left_arm"}), 32, 32)
        vis = visibility_between(render_layers(figure, source, 32, 32), target_rendering)
        assert np.array_equal(vis.grid[..., 0] > 0, target_rendering.part_mask("left_arm"))


class TestBuildDataset:
    def test_layout(self, tiny_data, tiny_cfg):
        lines = (tiny_data / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == tiny_cfg.n_figures * tiny_cfg.views_per_figure
        record = json.loads(lines[0])
        assert record["person_id"] == "p0000" and record["view_id"] == "v00"
        for key in ("image", "segmentation", "meta"):
            assert (tiny_data / record[key]).is_file()
        info = json.loads((tiny_data / "dataset.json").read_text())
        assert info["image_size"] == 32 and info["num_joints"] == NUM_JOINTS

    def test_same_seed_same_manifest(self, tiny_data, tiny_cfg, tmp_path):
        build_dataset(tiny_cfg, tmp_path)
        assert (tmp_path / "manifest.jsonl").read_bytes() == (tiny_data / "manifest.jsonl").read_bytes()
        assert (tmp_path / "meta" / "p0001_v02.json").read_bytes() == (tiny_data / "meta" / "p0001_v02.json").read_bytes()

    def test_unwritable_output(self, tiny_cfg, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DatasetError):
            build_dataset(tiny_cfg, blocker)


class TestViewStore:
    def test_view_matches_metadata(self, tiny_store):
        view = tiny_store.view("p0001", "v02")
        meta = tiny_store.meta("p0001", "v02")
        assert np.array_equal(view.keypoints.xy, np.asarray(meta["keypoints"]["xy"]))
        assert np.array_equal(tiny_store.rendering("p0001", "v02").segmentation, view.segmentation)

    def test_self_visibility_is_foreground(self, tiny_store):
        vis = tiny_store.visibility("p0002", "v01", "v01")
        view = tiny_store.view("p0002", "v01")
        assert np.array_equal(vis.grid[..., 0] > 0, foreground_mask(view.segmentation))

    def test_resolve(self, tiny_store):
        assert tiny_store.resolve("p0003_v01") == ("p0003", "v01")
        with pytest.raises(DatasetError):
            tiny_store.resolve("p0099_v01")
