"""Scene generation, the oracle seeker, and persistence."""

import json

import numpy as np
import pytest

from boxlift.errors import ConfigError, PlacementFailure, SchemaError, UnsupportedVersion
from boxlift.geom import bev_iou, points_in_box, project_box3d
from boxlift.scene import (
    BASE_CATEGORY_NAMES,
    CATEGORIES,
    NOVEL_CATEGORY_NAMES,
    SceneConfig,
    SeekerNoiseConfig,
    generate_scene,
    load_scene,
    mask_to_rle,
    oracle_seek,
    pixels_in_box2d,
    rle_to_mask,
    save_detections,
    load_detections,
    save_scene,
    scene_to_dict,
)


def small_config(**kw) -> SceneConfig:
    base = dict(extent=18.0, counts={"car": 1}, density=30.0, clutter=30, occlusion=False)
    base.update(kw)
    return SceneConfig(**base)


class TestCategoryTable:
    def test_priors(self):
        assert CATEGORIES["car"].prior_size == (4.63, 1.97, 1.74)
        assert CATEGORIES["bus"].prior_size == (10.50, 2.94, 3.47)
        assert CATEGORIES["traffic_cone"].prior_size == (0.41, 0.41, 1.07)

    def test_super_groups(self):
        groups = {name: cat.super_category for name, cat in CATEGORIES.items()}
        assert groups["car"] == groups["truck"] == groups["construction_vehicle"] == 0
        assert groups["bus"] == groups["trailer"] == 1
        assert groups["barrier"] == 2
        assert groups["motorcycle"] == groups["bicycle"] == 3
        assert groups["pedestrian"] == groups["traffic_cone"] == 4

    def test_base_novel_split(self):
        assert set(BASE_CATEGORY_NAMES) == {
            "car", "construction_vehicle", "trailer", "barrier", "bicycle", "pedestrian",
        }
        assert set(NOVEL_CATEGORY_NAMES) == {"truck", "bus", "motorcycle", "traffic_cone"}


class TestGenerateScene:
    def test_clutter_only(self):
        scene = generate_scene(small_config(counts={}, clutter=100), 0)
        assert not scene.gt_boxes
        assert scene.points.shape[0] > 0
        assert scene.points[:, 2].max() <= 0.25 + 1e-12

    def test_all_points_inside_single_box(self):
        cfg = small_config(counts={"car": 1}, clutter=0)
        scene = generate_scene(cfg, 4)
        box, _ = scene.gt_boxes[0]
        inside = points_in_box(box.inflated(0.01), scene.points)
        assert inside.size == scene.points.shape[0]

    def test_determinism(self):
        cfg = small_config(counts={"car": 2, "pedestrian": 1}, occlusion=True)
        assert generate_scene(cfg, 9) == generate_scene(cfg, 9)

    def test_distinct_seeds_differ(self):
        cfg = small_config()
        assert generate_scene(cfg, 1) != generate_scene(cfg, 2)

    def test_no_bev_overlap(self):
        cfg = small_config(counts={"car": 4, "barrier": 2, "pedestrian": 3}, extent=22.0)
        scene = generate_scene(cfg, 21)
        boxes = [b for b, _ in scene.gt_boxes]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert bev_iou(boxes[i], boxes[j]) == 0.0

    def test_boxes_inside_extent(self):
        cfg = small_config(counts={"trailer": 1, "car": 2}, extent=25.0)
        scene = generate_scene(cfg, 2)
        for box, _ in scene.gt_boxes:
            assert np.abs(box.bev_corners()).max() <= cfg.extent

    def test_placement_failure(self):
        # far more buses than a tiny world can hold without overlap
        cfg = small_config(extent=8.0, counts={"bus": 30}, clutter=0)
        with pytest.raises(PlacementFailure):
            generate_scene(cfg, 0)

    def test_empty_world_rejected(self):
        with pytest.raises(ConfigError):
            small_config(counts={}, clutter=0).validate()

    def test_density_decreases_with_range(self):
        # identical car pinned at 10 m vs 40 m, mean surface points over 50 seeds
        from boxlift.geom import Box3D
        from boxlift.scene import _sample_box_surface

        near, far = [], []
        for seed in range(50):
            for r, bucket in ((10.0, near), (40.0, far)):
                box = Box3D((r, 0.0, 0.87), (4.63, 1.97, 1.74), 0.7)
                pts = _sample_box_surface(
                    box, np.array([0.0, 0.0, 1.8]), 20.0, 1500, np.random.default_rng(seed)
                )
                bucket.append(pts.shape[0])
        assert np.mean(far) < np.mean(near)

    def test_occlusion_removes_points(self):
        # a barrier directly between the ego and a car shadows part of the car
        cfg = dict(extent=30.0, counts={"car": 1, "barrier": 1}, density=60.0,
                   clutter=0, size_jitter=0.0)
        on = generate_scene(SceneConfig(occlusion=True, **cfg), 17)
        off = generate_scene(SceneConfig(occlusion=False, **cfg), 17)
        assert on.points.shape[0] <= off.points.shape[0]


class TestSceneRoundTrip:
    def test_roundtrip_identity(self, tmp_path):
        scene = generate_scene(small_config(counts={"car": 1, "bicycle": 1}), 33)
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        assert load_scene(path) == scene

    def test_truncated_file_names_missing_field(self, tmp_path):
        scene = generate_scene(small_config(), 1)
        doc = scene_to_dict(scene)
        del doc["gt"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="gt"):
            load_scene(path)

    def test_version_mismatch(self, tmp_path):
        scene = generate_scene(small_config(), 1)
        doc = scene_to_dict(scene)
        doc["version"] = 99
        path = tmp_path / "v99.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(UnsupportedVersion):
            load_scene(path)

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"version": 1,\n  "seed": }')
        with pytest.raises(SchemaError, match="line 2"):
            load_scene(path)


class TestOracleSeek:
    def test_noiseless_boxes_equal_projection(self):
        scene = generate_scene(small_config(counts={"car": 2}, clutter=0), 8)
        detections = oracle_seek(scene, SeekerNoiseConfig())
        assert detections
        for det in detections:
            cam = scene.cameras[det.view]
            gt_envs = [project_box3d(cam, b) for b, _ in scene.gt_boxes]
            assert any(det.box == env for env in gt_envs if env is not None)

    def test_noiseless_masks_are_projected_point_pixels(self):
        scene = generate_scene(small_config(counts={"car": 1}, clutter=0), 8)
        box, _ = scene.gt_boxes[0]
        detections = oracle_seek(scene, SeekerNoiseConfig())
        for det in detections:
            cam = scene.cameras[det.view]
            from boxlift.geom import project_points

            uv, depth = project_points(cam, scene.points)
            ok = (
                (depth > 0)
                & (uv[:, 0] >= 0) & (uv[:, 0] < cam.image_width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < cam.image_height)
            )
            flat = (
                np.floor(uv[ok, 1]).astype(np.int64) * cam.image_width
                + np.floor(uv[ok, 0]).astype(np.int64)
            )
            assert np.array_equal(det.mask, np.unique(flat))

    def test_mask_pixels_from_points_inside_gt(self):
        scene = generate_scene(small_config(counts={"car": 1, "pedestrian": 1}, clutter=50), 12)
        detections = oracle_seek(scene, SeekerNoiseConfig())
        for det in detections:
            gt_box = next(b for b, c in scene.gt_boxes if c is det.category)
            members = set(points_in_box(gt_box.inflated(0.01), scene.points).tolist())
            cam = scene.cameras[det.view]
            from boxlift.geom import project_points

            uv, depth = project_points(cam, scene.points)
            for pix in det.mask:
                v, u = divmod(int(pix), cam.image_width)
                owners = [
                    i
                    for i in range(scene.points.shape[0])
                    if depth[i] > 0
                    and int(np.floor(uv[i, 0])) == u
                    and int(np.floor(uv[i, 1])) == v
                ]
                assert any(i in members for i in owners)

    def test_dropout_one_drops_everything(self):
        scene = generate_scene(small_config(counts={"car": 2}), 5)
        assert oracle_seek(scene, SeekerNoiseConfig(dropout_prob=1.0)) == []

    def test_determinism(self):
        scene = generate_scene(small_config(counts={"car": 2}), 5)
        noise = SeekerNoiseConfig(box_jitter_frac=0.1, leak_point_frac=0.1,
                                  score_noise_std=0.2, dropout_prob=0.2)
        assert oracle_seek(scene, noise) == oracle_seek(scene, noise)

    def test_jitter_bounded_by_fraction(self):
        scene = generate_scene(small_config(counts={"car": 1}, clutter=0), 8)
        clean = oracle_seek(scene, SeekerNoiseConfig())
        noisy = oracle_seek(scene, SeekerNoiseConfig(box_jitter_frac=0.1))
        assert len(clean) == len(noisy)
        for c, n in zip(clean, noisy):
            for attr in ("min_u", "max_u"):
                assert abs(getattr(n.box, attr) - getattr(c.box, attr)) <= 0.1 * c.box.width + 1e-9
            for attr in ("min_v", "max_v"):
                assert abs(getattr(n.box, attr) - getattr(c.box, attr)) <= 0.1 * c.box.height + 1e-9

    def test_mask_stays_inside_box(self):
        scene = generate_scene(small_config(counts={"car": 2}, clutter=80), 19)
        noise = SeekerNoiseConfig(box_jitter_frac=0.2, mask_erode_dilate_px=2,
                                  leak_point_frac=0.3)
        for det in oracle_seek(scene, noise):
            cam = scene.cameras[det.view]
            allowed = set(pixels_in_box2d(det.box, cam.image_width, cam.image_height).tolist())
            assert set(det.mask.tolist()) <= allowed

    def test_scores_in_unit_interval(self):
        scene = generate_scene(small_config(counts={"car": 2}), 5)
        noise = SeekerNoiseConfig(box_jitter_frac=0.3, score_noise_std=0.5)
        for det in oracle_seek(scene, noise):
            assert 0.0 <= det.seeker_score <= 1.0


class TestRle:
    def test_roundtrip_random_masks(self):
        rng = np.random.default_rng(0)
        total = 5000
        for _ in range(20):
            flat = np.sort(rng.choice(total, size=rng.integers(0, 400), replace=False))
            assert np.array_equal(rle_to_mask(mask_to_rle(flat, total), total), flat)

    def test_empty_mask(self):
        assert mask_to_rle(np.empty(0, dtype=np.int64), 10) == [10]
        assert rle_to_mask([10], 10).size == 0

    def test_bad_total_rejected(self):
        with pytest.raises(SchemaError):
            rle_to_mask([3, 3], 10)

    def test_detections_file_roundtrip(self, tmp_path):
        scene = generate_scene(small_config(counts={"car": 2}, clutter=40), 6)
        dets = oracle_seek(scene, SeekerNoiseConfig(box_jitter_frac=0.05, leak_point_frac=0.1))
        path = tmp_path / "dets.json"
        cam = scene.cameras[0]
        save_detections(dets, cam.image_width, cam.image_height, path)
        assert load_detections(path) == dets
