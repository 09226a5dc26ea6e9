import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcdistill.core import (Box3D, ConfigError, LabeledScene, PipelineConfig,
                            Point, PointCloud, normalize_yaw,
                            pipeline_config_from_text, pipeline_config_to_text,
                            seeded_rng)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = seeded_rng(0).random(100)
        b = seeded_rng(0).random(100)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_rng(0).random(10)
        b = seeded_rng(1).random(10)
        assert not np.array_equal(a, b)

    def test_uniform_range(self):
        draws = seeded_rng(3).random(1000)
        assert (draws >= 0).all() and (draws < 1).all()


class TestNormalizeYaw:
    @pytest.mark.parametrize("theta,expected", [
        (0.0, 0.0),
        (3 * math.pi, math.pi),
        (-math.pi, math.pi),
        (math.pi, math.pi),
        (2 * math.pi, 0.0),
    ])
    def test_values(self, theta, expected):
        assert normalize_yaw(theta) == pytest.approx(expected, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_yaw(float("nan"))
        with pytest.raises(ValueError):
            normalize_yaw(float("inf"))

    @given(st.floats(-1e6, 1e6))
    def test_idempotent_and_in_range(self, theta):
        once = normalize_yaw(theta)
        assert -math.pi < once <= math.pi
        assert normalize_yaw(once) == pytest.approx(once, abs=1e-12)

    @given(st.floats(-50, 50))
    def test_congruent_mod_2pi(self, theta):
        r = normalize_yaw(theta)
        assert math.isclose(math.cos(r), math.cos(theta), abs_tol=1e-9)
        assert math.isclose(math.sin(r), math.sin(theta), abs_tol=1e-9)


class TestDomainTypes:
    def test_point_validation(self):
        with pytest.raises(ValueError):
            Point(0, 0, 0, 1.5)
        with pytest.raises(ValueError):
            Point(float("nan"), 0, 0, 0.5)
        p = Point(1, 2, 3, 0.5)
        assert p.r == 0.5

    def test_cloud_basics(self):
        arr = np.array([[0, 0, 0, 0.1], [1, 1, 1, 0.9]])
        cloud = PointCloud(arr)
        assert cloud.n == 2
        assert [p.x for p in cloud] == [0.0, 1.0]
        assert not cloud.xyzr.flags.writeable

    def test_cloud_rejects_empty_and_bad_reflectance(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 4)))
        with pytest.raises(ValueError):
            PointCloud(np.array([[0, 0, 0, 2.0]]))

    def test_box_normalizes_yaw_and_validates(self):
        b = Box3D(0, 0, 0, 1, 2, 3, 3 * math.pi)
        assert b.yaw == pytest.approx(math.pi)
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, -1, 2, 3, 0)

    def test_scene_length_mismatch(self):
        cloud = PointCloud(np.array([[0, 0, 0, 0.5]]))
        box = Box3D(0, 0, 0, 1, 1, 1, 0)
        with pytest.raises(ValueError):
            LabeledScene(cloud=cloud, boxes=(box,), class_ids=(0, 1))
        scene = LabeledScene(cloud=cloud, boxes=(box,), class_ids=(1,))
        with pytest.raises(ValueError):
            scene.check_classes(1)


class TestPipelineConfig:
    def test_published_defaults(self):
        cfg = PipelineConfig()
        assert cfg.n_keypoints == 4096
        assert cfg.repo_msg_radii == (0.2, 0.4, 0.8)
        assert cfg.repo_msg_channels == ((16, 16, 32), (16, 16, 32), (32, 32, 64))
        assert cfg.repo_init_dim == 64
        assert cfg.n_partial == 512
        assert cfg.partial_radius == 1.6
        assert cfg.partial_k == 32
        assert cfg.partial_mlp == (128, 256, 512)
        assert cfg.student_ed_channels == (64, 64, 128, 64, 64)
        assert cfg.repo_feature_dim == 128
        assert cfg.obj_k_student == 16
        assert cfg.obj_k_teacher == 32
        assert cfg.stats_dim == 256
        assert cfg.temperature == 3.0
        assert cfg.lambda_soft == 0.7
        assert cfg.lambda_hard == 0.3
        assert cfg.alpha_t == 0.25
        assert cfg.gamma == 2
        assert cfg.lambda_ind == 1.0
        assert cfg.lambda_corner == 1.0
        assert cfg.lr == 0.01
        assert abs(cfg.lambda_soft + cfg.lambda_hard - 1.0) < 1e-9

    def test_text_round_trip_is_byte_identical(self):
        cfg = PipelineConfig(n_keypoints=128, repo_msg_radii=(0.3, 0.6, 1.2),
                             lambda_soft=0.55, lambda_hard=0.45, seed=17)
        text = pipeline_config_to_text(cfg)
        cfg2 = pipeline_config_from_text(text)
        assert cfg2 == cfg
        assert pipeline_config_to_text(cfg2) == text

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="nkeypoints"):
            pipeline_config_from_text("nkeypoints = 12\n")

    def test_validation(self):
        with pytest.raises(ConfigError):
            PipelineConfig(repo_msg_radii=(0.8, 0.4, 0.2),
                           repo_msg_ks=(16, 16, 32))
        with pytest.raises(ConfigError):
            PipelineConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            PipelineConfig(gamma=3)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            pipeline_config_from_text("seed = 1\nseed = 2\n")
