import math

import numpy as np
import pytest

from pcdistill import autodiff as ad
from pcdistill import boxes as bx
from pcdistill import data as dat
from pcdistill import detector as det
from pcdistill.core import Box3D, seeded_rng


class TestClassStats:
    def test_momentum_one_freezes(self):
        stats = det.ClassStats(np.zeros((2, 4)))
        feats = seeded_rng(0).normal(size=(10, 4))
        labels = np.zeros(10, dtype=int)
        out = det.update_class_stats(stats, feats, labels, momentum=1.0)
        assert np.array_equal(out.rows, np.zeros((2, 4)))

    def test_constant_feature_converges_with_closed_form(self):
        v = np.array([0.5, -1.0, 2.0, 0.25])
        stats = det.ClassStats(np.zeros((1, 4)))
        for _ in range(1000):
            stats = det.update_class_stats(stats, v[None, :], [0], momentum=0.99)
        # closed form: row_k = (1 - 0.99^k) * v
        assert np.linalg.norm(stats.rows[0] - v) < 1e-3
        assert np.allclose(stats.rows[0], (1 - 0.99 ** 1000) * v, atol=1e-12)

    def test_two_classes_converge_independently(self):
        va = np.array([1.0, 0.0])
        vb = np.array([0.0, -2.0])
        stats = det.ClassStats(np.zeros((2, 2)))
        for _ in range(500):
            stats = det.update_class_stats(stats, np.stack([va, vb]), [0, 1], 0.99)
        assert np.allclose(stats.rows[0], (1 - 0.99 ** 500) * va, atol=1e-12)
        assert np.allclose(stats.rows[1], (1 - 0.99 ** 500) * vb, atol=1e-12)

    def test_absent_class_row_unchanged(self):
        stats = det.ClassStats(np.array([[1.0, 1.0], [2.0, 2.0]]))
        out = det.update_class_stats(stats, np.array([[5.0, 5.0]]), [0], 0.5)
        assert np.array_equal(out.rows[1], [2.0, 2.0])
        assert np.allclose(out.rows[0], [3.0, 3.0])


class TestModelStructure:
    def test_role_scale_counts(self, tiny_models):
        teacher, student = tiny_models
        assert len(student.partial_radii) == 1
        assert len(teacher.partial_radii) >= 2
        assert student.count_params() < teacher.count_params()

    def test_param_ratio_under_default_config(self):
        from pcdistill.core import PipelineConfig
        cfg = PipelineConfig()
        teacher = det.DetectorModel("teacher", cfg, 3, ["a", "b", "c"])
        student = det.DetectorModel("student", cfg, 3, ["a", "b", "c"])
        ratio = student.count_params() / teacher.count_params()
        assert ratio < 0.6

    def test_student_loc_head_lighter(self, tiny_models):
        teacher, student = tiny_models
        assert student.loc_head_params() < teacher.loc_head_params()


class TestForward:
    def test_repo_init_deterministic_and_width(self, tiny_models, tiny_scene):
        _, student = tiny_models
        with ad.no_grad():
            repo1, _, under1 = student.forward_repo_init(tiny_scene.cloud)
            repo2, _, _ = student.forward_repo_init(tiny_scene.cloud)
        assert np.array_equal(repo1.features.value, repo2.features.value)
        assert repo1.features.shape[1] == student.cfg.repo_init_dim
        assert not under1

    def test_small_cloud_padded_and_flagged(self, tiny_models):
        _, student = tiny_models
        rng = seeded_rng(0)
        small = dat.PointCloud(np.column_stack([rng.normal(size=(10, 3)),
                                                rng.random(10)]))
        with ad.no_grad():
            state = student.forward(small)
        assert state.undersized

    def test_query_counters_per_stage(self, tiny_models, tiny_scene):
        teacher, student = tiny_models
        cfg = student.cfg
        with ad.no_grad():
            s_state = student.forward(tiny_scene.cloud)
            t_state = teacher.forward(tiny_scene.cloud)
        assert s_state.query_counts["partial"] == cfg.n_partial
        assert t_state.query_counts["partial"] == 3 * cfg.n_partial
        assert s_state.query_counts["repo_init"] == 3 * cfg.n_keypoints
        n_scales = len(cfg.obj_radii)
        assert s_state.query_counts["object"] == n_scales * cfg.n_partial
        assert t_state.query_counts["object"] == n_scales * cfg.n_partial

    def test_partial_feature_widths(self, tiny_models, tiny_scene):
        teacher, student = tiny_models
        with ad.no_grad():
            s_state = student.forward(tiny_scene.cloud)
            t_state = teacher.forward(tiny_scene.cloud)
        assert s_state.pfeat.shape[1] == student.cfg.partial_mlp[-1]
        assert t_state.pfeat.shape[1] == 3 * student.cfg.partial_mlp[-1]

    def test_fused_repo_width(self, tiny_models, tiny_scene):
        _, student = tiny_models
        with ad.no_grad():
            state = student.forward(tiny_scene.cloud)
        assert state.repo_fused.features.shape[1] == student.cfg.repo_feature_dim

    def test_teacher_accepts_partial_override(self, tiny_models, tiny_scene):
        teacher, student = tiny_models
        with ad.no_grad():
            s_state = student.forward(tiny_scene.cloud)
            t_state = teacher.forward(tiny_scene.cloud,
                                      partial_rows=s_state.partial_rows)
        assert np.array_equal(t_state.partial_rows, s_state.partial_rows)
        assert np.array_equal(t_state.pcoords, s_state.pcoords)

    def test_published_default_widths(self):
        # default-config widths for the stage outputs
        from pcdistill.core import PipelineConfig
        cfg = PipelineConfig()
        assert cfg.repo_init_dim == 64
        assert cfg.partial_mlp[-1] == 512
        assert cfg.repo_feature_dim == 128
        assert cfg.stats_dim == 256


class TestVoteAndHeads:
    def test_zeroed_vote_layer_returns_coordinates(self, tiny_cfg, tiny_scene):
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        det.set_anchors_from_scenes(model, [tiny_scene])
        model.store.set("vote.0.w", np.zeros_like(model.store.params["vote.0.w"].value))
        model.store.set("vote.0.b", np.zeros(3))
        with ad.no_grad():
            state = model.forward(tiny_scene.cloud)
        assert np.allclose(state.votes.value, state.pcoords)

    def test_stats_row_of_ones_is_identity_modulation(self, tiny_cfg, tiny_scene):
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        model.stats = det.ClassStats(np.ones((2, tiny_cfg.stats_dim)))
        with ad.no_grad():
            state = model.forward(tiny_scene.cloud)
            logits = state.cls_logits.value
        # identical rows -> identical class scores for every point
        assert np.allclose(logits[:, 0], logits[:, 1], atol=1e-12)

    def test_zero_stats_rows_collapse_scores(self, tiny_cfg, tiny_scene):
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        model.stats = det.ClassStats(np.zeros((2, tiny_cfg.stats_dim)))
        with ad.no_grad():
            state = model.forward(tiny_scene.cloud)
        logits = state.cls_logits.value
        assert np.allclose(logits[:, 0], logits[:, 1], atol=1e-12)

    def test_argmax_invariant_to_final_rescale(self, tiny_models, tiny_scene):
        _, student = tiny_models
        with ad.no_grad():
            state = student.forward(tiny_scene.cloud)
        before = state.cls_logits.value[:, :2].argmax(axis=1)
        w = student.store.params["cls.1.w"].value.copy()
        b = student.store.params["cls.1.b"].value.copy()
        student.store.set("cls.1.w", 3.0 * w)
        student.store.set("cls.1.b", 3.0 * b)
        with ad.no_grad():
            state2 = student.forward(tiny_scene.cloud,
                                     partial_rows=state.partial_rows)
        after = state2.cls_logits.value[:, :2].argmax(axis=1)
        assert np.array_equal(before, after)
        student.store.set("cls.1.w", w)
        student.store.set("cls.1.b", b)

    def test_scaling_feature_scales_scores_linear_head(self, tiny_cfg):
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        rng = seeded_rng(3)
        model.stats = det.ClassStats(rng.normal(size=(2, tiny_cfg.stats_dim)))
        # single linear layer, zero bias: scores are linear in the feature
        d = tiny_cfg.stats_dim
        w = rng.normal(size=(d, 1))
        store = ad.ParamStore()
        store.param("cls.0.w", (d, 1), init=lambda s: w)
        store.param("cls.0.b", (1,), init="zeros")

        def score(f):
            mod = ad.mul(ad.reshape(ad.constant(f), (1, 1, d)),
                         ad.constant(model.stats.rows[None, :, :]))
            flat = ad.reshape(mod, (2, d))
            return ad.matmul(flat, store.params["cls.0.w"].value @ np.eye(1)
                             if False else store.params["cls.0.w"]).value

        f = rng.normal(size=d)
        s1 = score(f)
        s2 = score(3.0 * f)
        assert np.allclose(s2, 3.0 * s1, atol=1e-9)
        assert s1.argmax() == s2.argmax()

    def test_box_encode_decode_round_trip(self):
        rng = seeded_rng(4)
        for _ in range(20):
            box = Box3D(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1),
                        rng.uniform(0.5, 3), rng.uniform(0.5, 3), rng.uniform(0.5, 3),
                        rng.uniform(-math.pi, math.pi))
            vote = rng.uniform(-5, 5, 3)
            anchor = rng.uniform(0.5, 3, 3)
            back = det.decode_box(det.encode_box(box, vote, anchor), vote, anchor)
            assert np.abs(back.as_array()[:6] - box.as_array()[:6]).max() < 1e-9
            assert math.isclose(math.sin(back.yaw), math.sin(box.yaw), abs_tol=1e-9)
            assert math.isclose(math.cos(back.yaw), math.cos(box.yaw), abs_tol=1e-9)

    def test_zero_residuals_decode_to_anchor_at_vote(self):
        vote = np.array([1.0, 2.0, 3.0])
        anchor = np.array([1.5, 3.5, 1.4])
        box = det.decode_box(np.zeros(8), vote, anchor)
        assert np.allclose(box.center, vote)
        assert np.allclose(box.dims, anchor)
        assert box.yaw == 0.0


class TestLossesAndTraining:
    def test_breakdown_invariant_and_fg_flag(self, tiny_models, tiny_scene):
        teacher, student = tiny_models
        state = student.forward(tiny_scene.cloud)
        with ad.no_grad():
            t_state = teacher.forward(tiny_scene.cloud,
                                      partial_rows=state.partial_rows)
        total, bd = det.compute_scene_loss(student, state, tiny_scene,
                                           teacher, t_state)
        cfg = student.cfg
        assert bd.total == pytest.approx(
            cfg.lambda_soft * bd.soft_total() + cfg.lambda_hard * bd.hard_total(),
            abs=1e-9)
        assert bd.n_foreground >= 0

    def test_no_kd_reduces_to_supervised(self, tiny_models, tiny_scene):
        _, student = tiny_models
        state = student.forward(tiny_scene.cloud)
        total, bd = det.compute_scene_loss(student, state, tiny_scene,
                                           None, None, lambda_soft=0.0,
                                           lambda_hard=1.0)
        assert bd.soft_cls == 0.0 and bd.soft_loc == 0.0
        assert bd.total == pytest.approx(bd.hard_total(), abs=1e-9)

    def test_teacher_equal_weights_soft_terms_near_zero(self, tiny_cfg, tiny_scene):
        teacher = det.DetectorModel("teacher", tiny_cfg, 2, ["car", "cyclist"])
        clone = det.DetectorModel("teacher", tiny_cfg, 2, ["car", "cyclist"])
        clone.store.load_values(teacher.store.values())
        det.set_anchors_from_scenes(teacher, [tiny_scene])
        det.set_anchors_from_scenes(clone, [tiny_scene])
        state = clone.forward(tiny_scene.cloud)
        with ad.no_grad():
            t_state = teacher.forward(tiny_scene.cloud,
                                      partial_rows=state.partial_rows)
        _, bd = det.compute_scene_loss(clone, state, tiny_scene, teacher, t_state)
        # background entries compare c_soft against 1 - c_pred, so equal
        # weights give near-zero (not exactly zero) classification terms
        assert bd.soft_cls < 1e-3
        assert bd.soft_loc < 1e-9

    def test_frozen_teacher_untouched_and_enforced(self, tiny_models, tiny_scene,
                                                   monkeypatch):
        teacher, student = tiny_models
        before = teacher.store.state_bytes()
        for _ in range(3):
            det.distill_step(teacher, student, [tiny_scene], lr=1e-3)
        assert teacher.store.state_bytes() == before
        # teacher outputs are consumed as detached values, so gradients cannot
        # arrive through the loss; the guard still refuses a step in which any
        # teacher parameter picks one up
        def leak(scene, state):
            teacher.store.params["vote.0.b"].grad = np.ones(3)

        with pytest.raises(RuntimeError, match="frozen"):
            det.distill_step(teacher, student, [tiny_scene], lr=1e-3,
                             state_hook=leak)
        teacher.store.zero_grad()
        assert teacher.store.state_bytes() == before

    def test_overfit_loss_decreases(self, tiny_cfg, tiny_scene):
        teacher = det.DetectorModel("teacher", tiny_cfg, 2, ["car", "cyclist"])
        det.set_anchors_from_scenes(teacher, [tiny_scene])
        first = det.distill_step(None, teacher, [tiny_scene], lr=0.004,
                                 lambda_soft=0.0, lambda_hard=1.0)
        last = None
        for _ in range(49):
            last = det.distill_step(None, teacher, [tiny_scene], lr=0.004,
                                    lambda_soft=0.0, lambda_hard=1.0)
        assert last.total < 0.6 * first.total

    def test_vote_loss_improves_with_training(self, tiny_cfg, tiny_scene):
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        det.set_anchors_from_scenes(model, [tiny_scene])
        first = det.distill_step(None, model, [tiny_scene], lr=0.004,
                                 lambda_soft=0.0, lambda_hard=1.0)
        for _ in range(50):
            last = det.distill_step(None, model, [tiny_scene], lr=0.004,
                                    lambda_soft=0.0, lambda_hard=1.0)
        assert last.center_vote < first.center_vote

    def test_end_to_end_seed_determinism(self, tiny_cfg, tiny_scene):
        def run():
            teacher = det.DetectorModel("teacher", tiny_cfg, 2, ["car", "cyclist"])
            student = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
            det.set_anchors_from_scenes(teacher, [tiny_scene])
            det.set_anchors_from_scenes(student, [tiny_scene])
            history = det.train_model(student, [tiny_scene] * 4, teacher=teacher,
                                      epochs=2, batch_size=2, lr=0.002,
                                      seed_label="determinism")
            return [bd.as_row() for _, bd, _ in history]

        assert run() == run()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # injected inf
    def test_nan_guard_restores_last_good(self, tiny_cfg, tiny_scene):
        from pcdistill.core import NumericError
        model = det.DetectorModel("student", tiny_cfg, 2, ["car", "cyclist"])
        det.set_anchors_from_scenes(model, [tiny_scene])
        good = model.store.values()
        model.store.set("vote.0.b", np.array([np.inf, 0.0, 0.0]))
        with pytest.raises(NumericError):
            det.train_model(model, [tiny_scene], epochs=1, batch_size=1,
                            lambda_soft=0.0, lambda_hard=1.0,
                            seed_label="nan", augment=False)


class TestPredictAndEval:
    def test_untrained_predict_returns_detections_object(self, tiny_models, tiny_scene):
        _, student = tiny_models
        out = det.predict(student, tiny_scene.cloud, score_threshold=0.0)
        assert isinstance(out, det.Detections)
        assert (out.scores >= 0).all() and (out.scores <= 1).all()
        for b in out.boxes:
            assert b.w > 0 and b.l > 0 and b.h > 0

    def test_threshold_above_one_gives_zero_detections(self, tiny_models, tiny_scene):
        _, student = tiny_models
        out = det.predict(student, tiny_scene.cloud, score_threshold=1.01)
        assert len(out) == 0

    def test_provenance_points_into_partial_rows(self, tiny_models, tiny_scene):
        _, student = tiny_models
        out = det.predict(student, tiny_scene.cloud, score_threshold=0.0)
        if len(out):
            assert (out.provenance >= 0).all()
            assert (out.provenance < student.cfg.n_partial * 10).all()

    def test_evaluate_model_covers_all_classes(self, tiny_models, tiny_scene):
        _, student = tiny_models
        aps = det.evaluate_model(student, [tiny_scene], 0.5, 11)
        assert set(aps) == {0, 1}


class TestCheckpointing:
    def test_model_round_trip(self, tiny_models, tiny_scene, tmp_path):
        teacher, _ = tiny_models
        path = tmp_path / "teacher.pcd"
        det.save_model(path, teacher)
        back = det.load_model(path)
        assert back.role == "teacher"
        assert back.n_classes == teacher.n_classes
        assert back.class_names == teacher.class_names
        assert back.store.state_bytes() == teacher.store.state_bytes()
        assert np.array_equal(back.stats.rows, teacher.stats.rows)
        assert np.array_equal(back.anchors, teacher.anchors)
        with ad.no_grad():
            a = teacher.forward(tiny_scene.cloud)
            b = back.forward(tiny_scene.cloud)
        assert np.array_equal(a.cls_logits.value, b.cls_logits.value)


class TestPipelineGradcheck:
    def test_full_hybrid_loss_gradients(self):
        worst, name = det.pipeline_gradcheck()
        assert worst < 1e-4, (worst, name)
