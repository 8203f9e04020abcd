"""Autodiff core: forward values, backward rules, tape semantics, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdetr import tensor as T
from sdetr.tensor import ContractError, FormatError, ShapeError, Tensor

from conftest import check_gradients


def t64(a, requires_grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


class TestLinear:
    def test_identity_weight_passes_input(self):
        x = t64([[1.0, 0.0]])
        w = t64(np.eye(2))
        b = t64([0.0, 0.0])
        y = T.linear(x, w, b)
        np.testing.assert_array_equal(y.data, [[1.0, 0.0]])

    def test_zero_weight_passes_bias(self):
        x = t64([[1.0, 2.0]])
        w = t64(np.zeros((2, 2)))
        b = t64([3.0, 4.0])
        y = T.linear(x, w, b)
        np.testing.assert_array_equal(y.data, [[3.0, 4.0]])

    def test_shape_mismatch_names_axes(self):
        x = t64(np.zeros((2, 3)))
        w = t64(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match="inner axes"):
            T.matmul(x, w)
        with pytest.raises(ShapeError, match="bias"):
            T.add_bias(x, t64(np.zeros(5)))

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        w = t64(rng.standard_normal((4, 5)))
        b = t64(rng.standard_normal(5))
        s = Tensor(rng.standard_normal((3, 5)))  # fixed mixing to make loss nontrivial

        def loss():
            return T.sum_all(T.mul(T.linear(x, w, b), s))

        check_gradients(loss, [x, w, b], rng, tol=1e-6)


class TestLayerNorm:
    def test_constant_row_normalizes_to_zero(self):
        x = t64([[5.0, 5.0, 5.0, 5.0]])
        y = T.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-9)

    def test_already_normalized_row_is_fixed_point(self):
        x = t64([[1.0, -1.0]])
        y = T.layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(y.data, [[1.0, -1.0]], atol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.standard_normal((4, 6)))
        gm = t64(rng.standard_normal(6) + 1.0)
        bt = t64(rng.standard_normal(6))
        s = Tensor(rng.standard_normal((4, 6)))

        def loss():
            return T.sum_all(T.mul(T.layer_norm(x, gm, bt), s))

        check_gradients(loss, [x, gm, bt], rng, tol=1e-5)


class TestGelu:
    def test_zero_maps_to_zero(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_tail_approaches_identity(self):
        y = T.gelu(t64([6.0])).data[0]
        assert abs(y - 6.0) < 1e-6

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.standard_normal(32) * 2.0)
        s = Tensor(rng.standard_normal(32))

        def loss():
            return T.sum_all(T.mul(T.gelu(x), s))

        check_gradients(loss, [x], rng, n_coords=10, tol=1e-5)


class TestSoftmax:
    def test_uniform_logits_give_uniform_weights(self):
        y = T.softmax(t64([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(y.data, 1.0 / 3.0, atol=1e-15)

    def test_large_logits_saturate_without_overflow(self):
        y = T.softmax(t64([1000.0, 0.0]), axis=-1)
        np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        x = t64(r.standard_normal((3, 7)) * r.uniform(0.1, 50))
        y = T.softmax(x, axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        x = t64(rng.standard_normal((3, 5)))
        s = Tensor(rng.standard_normal((3, 5)))

        def loss():
            return T.sum_all(T.mul(T.softmax(x, axis=-1), s))

        check_gradients(loss, [x], rng, tol=1e-5)


class TestBackward:
    def test_sum_seeds_ones(self):
        x = t64([1.0, 2.0, 3.0])
        with T.tape() as tp:
            tp.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_derivative(self):
        x = t64([1.0, 2.0])
        with T.tape() as tp:
            tp.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_fanout_accumulates(self):
        x = t64([3.0, -1.0])
        with T.tape() as tp:
            tp.backward(T.sum_all(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0])
        with T.tape() as tp:
            y = T.mul(x, x)
            with pytest.raises(ContractError, match="scalar"):
                tp.backward(y)

    def test_loss_off_tape_rejected(self):
        x = t64([1.0])
        with T.tape() as tp:
            with pytest.raises(ContractError, match="tape"):
                tp.backward(T.sum_all(x.detach()))

    def test_batch_split_matches_joint_pass(self, rng):
        w = t64(rng.standard_normal((4, 3)))
        xa = Tensor(rng.standard_normal((2, 4)))
        xb = Tensor(rng.standard_normal((2, 4)))

        def run(x):
            with T.tape() as tp:
                tp.backward(T.sum_all(T.mul(T.matmul(x, w), T.matmul(x, w))))

        run(xa)
        run(xb)
        split = w.grad.copy()
        w.zero_grad()
        xj = Tensor(np.concatenate([xa.data, xb.data], axis=0))
        run(xj)
        np.testing.assert_allclose(split, w.grad, atol=1e-10)

    def test_forward_is_deterministic(self, rng):
        x = Tensor(rng.standard_normal((8, 8)))
        w = Tensor(rng.standard_normal((8, 8)))
        a = T.matmul(T.softmax(x, axis=-1), w).data
        b = T.matmul(T.softmax(x, axis=-1), w).data
        assert np.array_equal(a, b)

    def test_no_grad_disables_recording(self):
        x = t64([1.0])
        with T.tape() as tp:
            with T.no_grad():
                T.mul(x, x)
            assert len(tp) == 0


class TestStructuralOps:
    def test_gather_scatter_roundtrip_and_grads(self, rng):
        x = t64(rng.standard_normal((2, 6, 3)))
        rows = t64(rng.standard_normal((2, 2, 3)))
        idx = np.array([[1, 4], [0, 5]])
        s = Tensor(rng.standard_normal((2, 6, 3)))

        def loss():
            return T.sum_all(T.mul(T.scatter_tokens(x, idx, rows), s))

        check_gradients(loss, [x, rows], rng, tol=1e-6)
        out = T.scatter_tokens(x, idx, rows)
        assert np.array_equal(out.data[0, 2], x.data[0, 2])
        assert np.array_equal(out.data[0, 1], rows.data[0, 0])

    def test_gather_tokens_grads(self, rng):
        x = t64(rng.standard_normal((2, 5, 3)))
        idx = np.array([[0, 0, 3], [2, 4, 4]])  # duplicates must accumulate
        s = Tensor(rng.standard_normal((2, 3, 3)))

        def loss():
            return T.sum_all(T.mul(T.gather_tokens(x, idx), s))

        check_gradients(loss, [x], rng, tol=1e-6)

    def test_take_cols_grads(self, rng):
        x = t64(rng.standard_normal((3, 10)))
        idx = np.array([[0, 1, 1], [9, 5, 0]])
        s = Tensor(rng.standard_normal((3, 2, 3)))

        def loss():
            return T.sum_all(T.mul(T.take_cols(x, idx), s))

        check_gradients(loss, [x], rng, tol=1e-6)

    def test_concat_slice_transpose_grads(self, rng):
        a = t64(rng.standard_normal((2, 3)))
        b = t64(rng.standard_normal((2, 2)))
        s = Tensor(rng.standard_normal((3, 2)))

        def loss():
            cat = T.concat([a, b], axis=1)
            sl = T.slice_axis(cat, 1, 1, 4)
            return T.sum_all(T.mul(T.transpose(sl, (1, 0)), s))

        check_gradients(loss, [a, b], rng, tol=1e-6)

    def test_reductions_grads(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        s = Tensor(rng.standard_normal((3, 1)))

        def loss():
            m = T.mean_axis(x, axis=1, keepdims=True)
            return T.sum_all(T.mul(m, s))

        check_gradients(loss, [x], rng, tol=1e-6)


class TestElementwise:
    @pytest.mark.parametrize("op,domain", [
        (T.relu, (-2.0, 2.0)),
        (T.abs_, (-2.0, 2.0)),
        (T.exp, (-2.0, 2.0)),
        (T.log, (0.2, 3.0)),
        (T.sqrt, (0.2, 3.0)),
        (T.sigmoid, (-4.0, 4.0)),
    ])
    def test_unary_grads(self, rng, op, domain):
        lo, hi = domain
        x = t64(rng.uniform(lo, hi, size=16))
        # stay away from kinks of relu/abs
        if op in (T.relu, T.abs_):
            x.data[np.abs(x.data) < 5e-3] = 0.5
        s = Tensor(rng.standard_normal(16))

        def loss():
            return T.sum_all(T.mul(op(x), s))

        check_gradients(loss, [x], rng, n_coords=8, tol=1e-5)

    def test_maximum_minimum_grads(self, rng):
        a = t64(rng.standard_normal(12))
        b = t64(rng.standard_normal(12))
        near = np.abs(a.data - b.data) < 5e-3
        b.data[near] += 0.5
        s = Tensor(rng.standard_normal(12))

        def loss():
            return T.sum_all(T.mul(T.add(T.maximum(a, b), T.minimum(a, b)), s))

        check_gradients(loss, [a, b], rng, n_coords=6, tol=1e-5)

    def test_bmm_grads(self, rng):
        a = t64(rng.standard_normal((2, 3, 4)))
        b = t64(rng.standard_normal((2, 4, 5)))
        s = Tensor(rng.standard_normal((2, 3, 5)))

        def loss():
            return T.sum_all(T.mul(T.bmm(a, b), s))

        check_gradients(loss, [a, b], rng, tol=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = [
            ("enc.w", Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)),
            ("enc.b", Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)),
        ]
        path = tmp_path / "m.sdtr"
        T.save_parameters(params, str(path))
        loaded = T.load_parameters(str(path))
        assert list(loaded) == ["enc.w", "enc.b"]
        for name, t in params:
            np.testing.assert_array_equal(loaded[name], t.data)

    def test_truncated_file_reports_length(self, tmp_path, rng):
        path = tmp_path / "m.sdtr"
        T.save_parameters([("w", Tensor(np.ones((2, 2), np.float32)))], str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="truncated"):
            T.load_parameters(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.sdtr"
        path.write_bytes(b"NOPE!")
        with pytest.raises(FormatError, match="magic"):
            T.load_parameters(str(path))
