import math

import numpy as np
import pytest

from pcdistill import data as dat
from pcdistill.core import Box3D, ConfigError, seeded_rng

from oracles import point_in_box_scalar


def small_cfg(**kw):
    defaults = dict(extent=(16.0, 16.0, 4.0), objects_min=1, objects_max=3,
                    surface_density=4.0, clutter_density=0.1, noise_points=6)
    defaults.update(kw)
    return dat.SceneGenConfig(**defaults)


class TestGenerateScene:
    def test_deterministic(self):
        cfg = small_cfg()
        a = dat.generate_scene(cfg, 42)
        b = dat.generate_scene(cfg, 42)
        assert np.array_equal(a.cloud.xyzr, b.cloud.xyzr)
        assert all(np.array_equal(x.as_array(), y.as_array())
                   for x, y in zip(a.boxes, b.boxes))
        assert a.class_ids == b.class_ids

    def test_zero_clutter_single_box_points_on_surface(self):
        cfg = small_cfg(clutter_density=0.0, noise_points=0,
                        objects_min=1, objects_max=1)
        scene = dat.generate_scene(cfg, 7)
        b = scene.boxes[0]
        rel = scene.cloud.xyz - b.center
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        lx = c * rel[:, 0] + s * rel[:, 1]
        ly = -s * rel[:, 0] + c * rel[:, 1]
        face_dist = np.minimum.reduce([
            np.abs(np.abs(lx) - b.l / 2),
            np.abs(np.abs(ly) - b.w / 2),
            np.abs(np.abs(rel[:, 2]) - b.h / 2),
        ])
        assert face_dist.max() < 1e-6

    def test_every_box_has_min_points(self):
        cfg = small_cfg(dropout=0.4)
        for seed in range(6):
            scene = dat.generate_scene(cfg, seed)
            for b in scene.boxes:
                assert dat.points_in_box(scene.cloud.xyz, b).sum() >= 8

    def test_boxes_disjoint_in_bev(self):
        from pcdistill import boxes as bx
        scene = dat.generate_scene(small_cfg(objects_min=3, objects_max=3), 11)
        for i in range(scene.n_boxes):
            for j in range(i + 1, scene.n_boxes):
                assert bx.bev_iou(scene.boxes[i], scene.boxes[j]) == 0.0

    def test_size_distribution_means(self):
        cfg = small_cfg(objects_min=2, objects_max=4, surface_density=2.0,
                        clutter_density=0.0, noise_points=0)
        dims = {0: [], 1: []}
        for seed in range(250):
            scene = dat.generate_scene(cfg, 2000 + seed)
            for b, cid in zip(scene.boxes, scene.class_ids):
                dims[cid].append([b.w, b.l, b.h])
        for cid, spec in enumerate(cfg.classes):
            got = np.mean(dims[cid], axis=0)
            expected = np.array([np.mean(spec.w), np.mean(spec.l), np.mean(spec.h)])
            assert np.abs(got / expected - 1).max() < 0.05

    def test_impossible_packing_raises(self):
        cfg = small_cfg(extent=(5.0, 5.0, 4.0), objects_min=8, objects_max=8)
        with pytest.raises(dat.DataGenError):
            for seed in range(5):
                dat.generate_scene(cfg, seed)


class TestPointInBox:
    def test_matches_scalar_oracle(self):
        rng = seeded_rng(0)
        scene = dat.generate_scene(small_cfg(), 3)
        pts = scene.cloud.xyz
        extra = rng.uniform(-8, 8, size=(200, 3))
        allpts = np.vstack([pts, extra])
        for b in scene.boxes:
            got = dat.points_in_box(allpts, b)
            expected = np.array([point_in_box_scalar(p, b) for p in allpts])
            assert np.array_equal(got, expected)

    def test_labels_background_and_classes(self):
        scene = dat.generate_scene(small_cfg(clutter_density=0.3), 9)
        labels = dat.point_labels(scene.cloud.xyz, scene, len(scene.class_ids) and 2)
        assert set(np.unique(labels)) <= {0, 1, 2}
        for b, cid in zip(scene.boxes, scene.class_ids):
            inside = dat.points_in_box(scene.cloud.xyz, b)
            assert (labels[inside] == cid).all()


class TestAugment:
    def test_forced_flip_is_involution(self):
        scene = dat.generate_scene(small_cfg(), 21)
        rng = seeded_rng(1)
        once = dat.augment(scene, rng, flip=True, rotation=0.0, scale=1.0)
        twice = dat.augment(once, rng, flip=True, rotation=0.0, scale=1.0)
        assert np.allclose(twice.cloud.xyzr, scene.cloud.xyzr, atol=1e-12)
        for a, b in zip(scene.boxes, twice.boxes):
            assert np.allclose(a.as_array()[:6], b.as_array()[:6], atol=1e-12)
            assert math.isclose(math.sin(a.yaw), math.sin(b.yaw), abs_tol=1e-12)

    def test_scale_then_inverse_restores(self):
        scene = dat.generate_scene(small_cfg(), 22)
        rng = seeded_rng(2)
        s = 1.07
        up = dat.augment(scene, rng, flip=False, rotation=0.0, scale=s)
        down = dat.augment(up, rng, flip=False, rotation=0.0, scale=1.0 / s)
        assert np.allclose(down.cloud.xyz, scene.cloud.xyz, atol=1e-9)

    def test_membership_preserved(self):
        scene = dat.generate_scene(small_cfg(clutter_density=0.4), 23)
        before = dat.point_labels(scene.cloud.xyz, scene, 2)
        rng = seeded_rng(3)
        aug = dat.augment(scene, rng, flip=True, rotation=0.41, scale=0.93)
        after = dat.point_labels(aug.cloud.xyz, aug, 2)
        assert np.array_equal(before, after)

    def test_random_draws_within_published_ranges(self):
        scene = dat.generate_scene(small_cfg(), 24)
        rng = seeded_rng(4)
        for _ in range(25):
            aug = dat.augment(scene, rng)
            ratio = np.linalg.norm(aug.cloud.xyz[0]) / np.linalg.norm(scene.cloud.xyz[0])
            assert 0.9 - 1e-9 <= ratio <= 1.1 + 1e-9

    def test_object_noise_keeps_members_inside(self):
        scene = dat.generate_scene(small_cfg(clutter_density=0.0, noise_points=0), 25)
        rng = seeded_rng(5)
        noisy = dat.object_noise(scene, rng)
        for b in noisy.boxes:
            assert dat.points_in_box(noisy.cloud.xyz, b).sum() >= 8


class TestSceneIO:
    def test_round_trip_bit_identical(self, tmp_path):
        scene = dat.generate_scene(small_cfg(), 31)
        path = tmp_path / "scene.pcs"
        dat.save_scene(path, scene)
        back = dat.load_scene(path)
        assert np.array_equal(back.cloud.xyzr, scene.cloud.xyzr)
        for a, b in zip(scene.boxes, back.boxes):
            assert np.array_equal(a.as_array(), b.as_array())
        assert back.class_ids == scene.class_ids

    def test_truncated_file_reports_offset(self, tmp_path):
        scene = dat.generate_scene(small_cfg(), 32)
        path = tmp_path / "scene.pcs"
        dat.save_scene(path, scene)
        blob = path.read_bytes()
        path.write_bytes(blob[:20])
        with pytest.raises(ValueError, match="byte offset"):
            dat.load_scene(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pcs"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            dat.load_scene(path)

    def test_background_only_scene_legal(self, tmp_path):
        from pcdistill.core import LabeledScene, PointCloud
        cloud = PointCloud(seeded_rng(0).random((10, 4)))
        scene = LabeledScene(cloud=cloud, boxes=(), class_ids=())
        path = tmp_path / "empty.pcs"
        dat.save_scene(path, scene)
        back = dat.load_scene(path)
        assert back.n_boxes == 0
        assert np.array_equal(back.cloud.xyzr, cloud.xyzr)

    def test_dataset_manifest_and_determinism(self, tmp_path):
        cfg = small_cfg()
        d1, d2 = tmp_path / "a", tmp_path / "b"
        m1 = dat.write_dataset(d1, cfg, [5, 6, 7])
        m2 = dat.write_dataset(d2, cfg, [5, 6, 7])
        assert m1["seeds"] == [5, 6, 7]
        assert m1["files"] == m2["files"]
        for f in m1["files"]:
            assert (d1 / f).read_bytes() == (d2 / f).read_bytes()
        scenes, names, manifest = dat.load_dataset(d1)
        assert len(scenes) == 3
        assert names == cfg.class_names
        assert manifest["config"] == dat.scene_config_to_text(cfg)


class TestSceneConfigText:
    def test_round_trip(self):
        cfg = small_cfg()
        text = dat.scene_config_to_text(cfg)
        cfg2 = dat.scene_config_from_text(text)
        assert cfg2 == cfg
        assert dat.scene_config_to_text(cfg2) == text

    def test_missing_class_bound_names_key(self):
        text = dat.scene_config_to_text(small_cfg())
        broken = text.replace("class.cyclist.h", "class.cyclist.x")
        with pytest.raises(ConfigError, match="class.cyclist.h"):
            dat.scene_config_from_text(broken)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="wat"):
            dat.scene_config_from_text("wat = 1\n")
