import math
import os

import numpy as np
import pytest

from pcdistill import autodiff as ad
from pcdistill.core import NumericError


class TestForwardOps:
    def test_sigmoid_symmetry_point(self):
        assert float(ad.sigmoid(ad.constant(0.0)).value) == 0.5

    def test_relu_definition(self):
        out = ad.relu(ad.constant(np.array([-2.0, 3.0])))
        assert out.value.tolist() == [0.0, 3.0]

    def test_matmul_identity(self):
        a = np.arange(9.0).reshape(3, 3) + 1
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
        assert np.array_equal(out.value, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4, 5))))
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(ad.constant(np.zeros(2)), ad.constant(np.zeros(3)))

    def test_max_ties_to_lowest_index(self):
        x = ad.leaf(np.array([[1.0, 2.0, 2.0]]))
        out = ad.max_over_set(x, axis=1)
        ad.backward(ad.sum_(out))
        assert x.grad.tolist() == [[0.0, 1.0, 0.0]]

    def test_operator_sugar(self):
        x = ad.leaf(2.0)
        y = (x * 3.0 + 1.0) / 2.0 - 0.5
        assert float(y.value) == pytest.approx(3.0)
        assert float(-x) == -2.0


class TestBackward:
    def test_square_gradient(self):
        x = ad.leaf(3.0)
        ad.backward(ad.mul(x, x))
        assert float(x.grad) == pytest.approx(6.0)

    def test_sigmoid_gradient_at_zero(self):
        x = ad.leaf(0.0)
        ad.backward(ad.sigmoid(x))
        assert float(x.grad) == pytest.approx(0.25)

    def test_fanout_sums_contributions(self):
        x = ad.leaf(1.5)
        ad.backward(ad.add(x, x))
        assert float(x.grad) == pytest.approx(2.0)

    def test_repeated_backward_accumulates(self):
        x = ad.leaf(2.0)
        ad.backward(ad.mul(x, x))
        ad.backward(ad.mul(x, x))
        assert float(x.grad) == pytest.approx(8.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.leaf(np.zeros(3)))

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        store = ad.ParamStore()
        w1 = store.param("w1", (4, 5), rng=rng)
        w2 = store.param("w2", (5, 3), rng=rng)
        b = store.param("b", (3,), init="zeros")
        x = np.abs(rng.normal(size=(7, 4))) + 0.2

        def loss():
            h = ad.relu(ad.matmul(ad.constant(x), w1))
            out = ad.add(ad.matmul(h, w2), b)
            return ad.mean(ad.mul(ad.sigmoid(out), out))

        worst, _ = ad.check_gradients(loss, store, h=1e-4)
        assert worst < 1e-4

    def test_no_grad_blocks_graph(self):
        x = ad.leaf(1.0)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.needs_grad
        ad.backward(y)
        assert x.grad is None


class TestGradcheckSuite:
    def test_every_primitive_passes(self):
        results = ad.gradcheck_primitives()
        assert results, "registry must not be empty"
        worst = max(results.values())
        assert worst < 1e-4, results

    def test_negative_control_names_broken_op(self, monkeypatch):
        def bad_sigmoid(a):
            a = ad._lift(a)
            v = a.value
            s = 1.0 / (1.0 + np.exp(-v))
            return ad.Node(s, (a,), lambda g: (g * s,))  # missing (1 - s)

        monkeypatch.setattr(ad, "sigmoid", bad_sigmoid)
        results = ad.gradcheck_primitives()
        assert results["sigmoid"] > 1e-4
        clean = {k: v for k, v in results.items() if k != "sigmoid"}
        assert max(clean.values()) < 1e-4


class TestParamStoreAndAdam:
    def test_param_count_exact(self):
        store = ad.ParamStore()
        store.param("a", (3, 4), init="zeros")
        store.param("b", (7,), init="zeros")
        assert store.count() == 3 * 4 + 7

    def test_duplicate_names_shape_checked(self):
        store = ad.ParamStore()
        store.param("a", (2, 2), init="zeros")
        with pytest.raises(ad.ShapeError):
            store.param("a", (3, 3))

    def test_zero_gradient_leaves_params_unchanged(self):
        store = ad.ParamStore()
        p = store.param("w", (4,), init="zeros")
        p.grad = np.zeros(4)
        ad.adam_step(store, lr=0.1)
        assert np.array_equal(p.value, np.zeros(4))

    def test_single_step_magnitude(self):
        store = ad.ParamStore()
        p = store.param("w", (1,), init="zeros")
        p.grad = np.ones(1)
        ad.adam_step(store, lr=0.01)
        assert p.value[0] == pytest.approx(-0.01, rel=1e-6)

    def test_constant_gradient_descends(self):
        store = ad.ParamStore()
        p = store.param("w", (1,), init="zeros")
        for _ in range(50):
            p.grad = np.ones(1)
            ad.adam_step(store, lr=0.01)
        assert p.value[0] < -0.2

    def test_check_finite(self):
        store = ad.ParamStore()
        p = store.param("w", (2,), init="zeros")
        p.value = np.array([1.0, float("nan")])
        with pytest.raises(NumericError):
            store.check_finite()


class TestSchedule:
    def test_warmup_then_decay(self):
        base = 0.01
        total = 100
        assert ad.lr_at(0, total, base) == pytest.approx(0.1 * base)
        assert ad.lr_at(10, total, base) == pytest.approx(base)
        assert ad.lr_at(total, total, base) == pytest.approx(0.01 * base, rel=1e-6)
        mid = ad.lr_at(55, total, base)
        assert 0.01 * base < mid < base


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "state.pcd"
        arrays = {
            "layer.w": np.arange(12.0).reshape(3, 4),
            "layer.b": np.array([0.5, -0.25]),
            "scalar": np.array(7.0),
        }
        ad.save_checkpoint(path, arrays, {"config": "lr = 0.01\n", "role": "t"})
        back, meta = ad.load_checkpoint(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k])
        assert meta == {"config": "lr = 0.01\n", "role": "t"}

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.pcd"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            ad.load_checkpoint(path)

    def test_little_endian_float64_layout(self, tmp_path):
        path = tmp_path / "one.pcd"
        ad.save_checkpoint(path, {"x": np.array([1.0])})
        blob = path.read_bytes()
        assert blob[:4] == b"PCD1"
        assert blob[-8:] == np.array([1.0], dtype="<f8").tobytes()
