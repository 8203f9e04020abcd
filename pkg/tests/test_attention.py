"""Bilinear sampling, dense attention, deformable attention, pair counting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdetr import tensor as T
from sdetr.attention import (AttentionRecord, DeformAttnConfig, DeformableAttention,
                             attention_pairs, bilinear_sample, build_feature_map,
                             dense_attention)
from sdetr.tensor import ContractError, Tensor

from conftest import check_gradients


def t64(a, requires_grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


def ref_bilinear(vmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Independent dense-sum reference: kernel over every integer location."""
    h, w, _ = vmap.shape
    px, py = x * w - 0.5, y * h - 0.5
    out = np.zeros(vmap.shape[-1])
    for iy in range(h):
        for ix in range(w):
            g = max(0.0, 1.0 - abs(ix - px)) * max(0.0, 1.0 - abs(iy - py))
            out += g * vmap[iy, ix]
    return out


class TestBilinearSample:
    def test_exact_at_integer_location(self, rng):
        vmap = t64(rng.standard_normal((4, 5, 3)))
        # token (i=2, j=3) center in normalized coords
        pt = t64([(3 + 0.5) / 5, (2 + 0.5) / 4])
        out = bilinear_sample(vmap, pt)
        np.testing.assert_array_equal(out.data, vmap.data[2, 3])

    def test_midpoint_of_four_cells(self):
        vmap = np.zeros((2, 2, 1))
        vmap[1, 1, 0] = 4.0
        out = bilinear_sample(t64(vmap), t64([0.5, 0.5]))
        np.testing.assert_allclose(out.data, [1.0], atol=1e-12)

    def test_matches_dense_kernel_reference(self, rng):
        vmap = rng.standard_normal((5, 7, 2))
        for _ in range(20):
            x, y = rng.uniform(0.05, 0.95, 2)
            got = bilinear_sample(t64(vmap), t64([x, y])).data
            np.testing.assert_allclose(got, ref_bilinear(vmap, x, y), atol=1e-10)

    def test_reconstructs_bilinear_functions(self, rng):
        # sampling f(x,y)=a*x+b*y+c rendered on its own grid returns f exactly
        h, w = 6, 9
        a, b, c = rng.standard_normal(3)
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        gx, gy = (jj + 0.5) / w, (ii + 0.5) / h
        vmap = (a * gx + b * gy + c)[..., None]
        for _ in range(25):
            # stay a cell-center away from the border so support is interior
            x = rng.uniform(0.5 / w, 1 - 0.5 / w)
            y = rng.uniform(0.5 / h, 1 - 0.5 / h)
            got = bilinear_sample(t64(vmap), t64([x, y])).data[0]
            assert abs(got - (a * x + b * y + c)) < 1e-6

    def test_outside_support_contributes_zero(self):
        vmap = t64(np.ones((2, 2, 1)))
        out = bilinear_sample(vmap, t64([-0.9, -0.9]))
        np.testing.assert_array_equal(out.data, [0.0])

    def test_nan_point_rejected(self):
        with pytest.raises(ContractError, match="finite"):
            bilinear_sample(t64(np.ones((2, 2, 1))), t64([np.nan, 0.5]))

    def test_gradients_match_finite_differences(self, rng):
        vmap = t64(rng.standard_normal((4, 4, 3)))
        # keep clear of grid lines (kernel kinks)
        pt_val = (np.floor(rng.uniform(0, 3, 2)) + rng.uniform(0.3, 0.7, 2) + 0.5) / 4.0
        pt = t64(pt_val)
        s = Tensor(rng.standard_normal(3))

        def loss():
            return T.sum_all(T.mul(bilinear_sample(vmap, pt), s))

        check_gradients(loss, [vmap, pt], rng, n_coords=8, tol=1e-4)

    def test_grid_sample_agrees_with_single_point(self, rng):
        vmap = rng.standard_normal((1, 5, 6, 4))
        pts = rng.uniform(0.05, 0.95, (1, 9, 2))
        batch = T.grid_sample(t64(vmap), t64(pts)).data[0]
        for i in range(9):
            single = bilinear_sample(t64(vmap[0]), t64(pts[0, i])).data
            np.testing.assert_allclose(batch[i], single, atol=1e-12)

    def test_grid_sample_gradients(self, rng):
        vmap = t64(rng.standard_normal((2, 4, 4, 3)))
        pts = (np.floor(rng.uniform(0, 3, (2, 5, 2))) + rng.uniform(0.3, 0.7, (2, 5, 2)) + 0.5) / 4.0
        loc = t64(pts)
        s = Tensor(rng.standard_normal((2, 5, 3)))

        def loss():
            return T.sum_all(T.mul(T.grid_sample(vmap, loc), s))

        check_gradients(loss, [vmap, loc], rng, n_coords=8, tol=1e-4)


def ref_dense_attention(q, k, v, heads):
    nq, d = q.shape
    nk = k.shape[0]
    hd = d // heads
    out = np.zeros((nq, d))
    for h in range(heads):
        qs = q[:, h * hd:(h + 1) * hd]
        ks = k[:, h * hd:(h + 1) * hd]
        vs = v[:, h * hd:(h + 1) * hd]
        for i in range(nq):
            logits = np.array([qs[i] @ ks[j] / np.sqrt(hd) for j in range(nk)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, h * hd:(h + 1) * hd] = sum(w[j] * vs[j] for j in range(nk))
    return out


class TestDenseAttention:
    def test_single_key_takes_all_mass(self, rng):
        q = t64(rng.standard_normal((3, 4)))
        k = t64(rng.standard_normal((1, 4)))
        v = t64(rng.standard_normal((1, 4)))
        out = dense_attention(q, k, v, heads=2)
        for i in range(3):
            np.testing.assert_allclose(out.data[i], v.data[0], atol=1e-12)

    def test_equal_logits_give_uniform_mixture(self, rng):
        q = t64(np.zeros((2, 4)))
        k = t64(rng.standard_normal((6, 4)))
        v = t64(rng.standard_normal((6, 4)))
        out = dense_attention(q, k, v, heads=1)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (2, 1)), atol=1e-10)

    def test_matches_per_pair_reference(self, rng):
        q = t64(rng.standard_normal((8, 4)))
        k = t64(rng.standard_normal((8, 4)))
        v = t64(rng.standard_normal((8, 4)))
        for heads in (1, 2):
            out = dense_attention(q, k, v, heads=heads)
            np.testing.assert_allclose(out.data, ref_dense_attention(q.data, k.data, v.data, heads),
                                       atol=1e-6)

    def test_pair_counter_counts_nq_times_nk(self, rng):
        attention_pairs.reset()
        q = t64(rng.standard_normal((1, 5, 4)))
        kv = t64(rng.standard_normal((1, 7, 4)))
        dense_attention(q, kv, kv, heads=2, tag="probe")
        assert attention_pairs.counts["probe"] == 5 * 7

    def test_padded_keys_excluded(self, rng):
        q = t64(rng.standard_normal((1, 2, 4)))
        k = t64(rng.standard_normal((1, 3, 4)))
        v = t64(rng.standard_normal((1, 3, 4)))
        pad = np.array([[False, False, True]])
        out = dense_attention(q, k, v, heads=1, pad_mask=pad)
        out_ref = dense_attention(
            t64(q.data), t64(k.data[:, :2]), t64(v.data[:, :2]), heads=1)
        np.testing.assert_allclose(out.data, out_ref.data, atol=1e-9)


def make_feat(rng, levels=((3, 4), (2, 2)), b=1, d=8, dtype=np.float64, pad=None):
    n = sum(h * w for h, w in levels)
    tokens = Tensor(rng.standard_normal((b, n, d)).astype(dtype), requires_grad=True)
    return build_feature_map(list(levels), tokens, pad_mask=pad)


def ref_deformable(layer: DeformableAttention, queries, ref, feat):
    """Per-slot loop oracle mirroring the documented semantics."""
    cfg = layer.cfg
    b, nq, d = queries.shape
    h_, l_, k_, hd = cfg.heads, cfg.levels, cfg.points, cfg.head_dim
    value = feat.tokens.data @ layer.value_w.data + layer.value_b.data
    value = value * (~feat.pad_mask)[:, :, None]
    offs = (queries @ layer.offset_w.data + layer.offset_b.data).reshape(b, nq, h_, l_, k_, 2)
    logits = (queries @ layer.logit_w.data + layer.logit_b.data).reshape(b, nq, h_, l_ * k_)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights = (e / e.sum(axis=-1, keepdims=True)).reshape(b, nq, h_, l_, k_)
    starts = feat.level_starts
    out = np.zeros((b, nq, d))
    for bi in range(b):
        for qi in range(nq):
            mixed = np.zeros(d)
            for hi in range(h_):
                acc = np.zeros(hd)
                for li, (gh, gw) in enumerate(feat.levels):
                    grid = value[bi, starts[li]:starts[li + 1]].reshape(gh, gw, h_, hd)[:, :, hi]
                    for ki in range(k_):
                        loc = ref[bi, qi] + offs[bi, qi, hi, li, ki]
                        acc = acc + weights[bi, qi, hi, li, ki] * ref_bilinear(grid, loc[0], loc[1])
                mixed[hi * hd:(hi + 1) * hd] = acc
            out[bi, qi] = mixed @ layer.out_w.data + layer.out_b.data
    return out


class TestDeformableAttention:
    def test_zero_init_samples_reference_points(self, rng):
        feat = make_feat(rng, d=8)
        cfg = DeformAttnConfig(heads=2, levels=2, points=3, head_dim=4)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        q = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
        ref = rng.uniform(0.2, 0.8, (1, 4, 2))
        out, rec = layer(q, ref, feat, record=True)
        # offset/logit heads start at zero: every slot sits at ref, uniform weights
        np.testing.assert_allclose(rec.locations, np.broadcast_to(
            ref[:, :, None, None, None, :], rec.locations.shape), atol=1e-12)
        np.testing.assert_allclose(rec.weights, 1.0 / 6.0, atol=1e-12)
        value = feat.tokens.data[0] @ layer.value_w.data + layer.value_b.data
        starts = feat.level_starts
        for qi in range(4):
            mixed = np.zeros(8)
            for hi in range(2):
                samples = []
                for li, (gh, gw) in enumerate(feat.levels):
                    grid = value[starts[li]:starts[li + 1]].reshape(gh, gw, 2, 4)[:, :, hi]
                    samples.append(ref_bilinear(grid, ref[0, qi, 0], ref[0, qi, 1]))
                mixed[hi * 4:(hi + 1) * 4] = np.mean(samples, axis=0)
            expect = mixed @ layer.out_w.data + layer.out_b.data
            np.testing.assert_allclose(out.data[0, qi], expect, atol=1e-9)

    def test_saturated_slot_takes_all_mass(self, rng):
        feat = make_feat(rng, d=8)
        cfg = DeformAttnConfig(heads=1, levels=2, points=2, head_dim=8)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        layer.logit_b.data[1] = 1e4  # slot (level 0, point 1)
        q = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
        ref = rng.uniform(0.3, 0.7, (1, 2, 2))
        out, rec = layer(q, ref, feat, record=True)
        onehot = np.zeros((1, 2, 1, 2, 2))
        onehot[:, :, :, 0, 1] = 1.0
        np.testing.assert_allclose(rec.weights, onehot, atol=1e-12)
        value = feat.tokens.data[0] @ layer.value_w.data + layer.value_b.data
        starts = feat.level_starts
        for qi in range(2):
            gh, gw = feat.levels[0]
            grid = value[starts[0]:starts[1]].reshape(gh, gw, 1, 8)[:, :, 0]
            sample = ref_bilinear(grid, ref[0, qi, 0], ref[0, qi, 1])
            expect = sample @ layer.out_w.data + layer.out_b.data
            np.testing.assert_allclose(out.data[0, qi], expect, atol=1e-6)

    def test_matches_per_slot_reference(self, rng):
        feat = make_feat(rng, d=8)
        cfg = DeformAttnConfig(heads=2, levels=2, points=2, head_dim=4)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        # random offset/logit heads instead of the zero init
        layer.offset_w.data[:] = rng.standard_normal(layer.offset_w.shape) * 0.1
        layer.offset_b.data[:] = rng.standard_normal(layer.offset_b.shape) * 0.1
        layer.logit_w.data[:] = rng.standard_normal(layer.logit_w.shape)
        layer.logit_b.data[:] = rng.standard_normal(layer.logit_b.shape)
        q = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
        ref = rng.uniform(0.1, 0.9, (1, 4, 2))
        out, _ = layer(q, ref, feat)
        np.testing.assert_allclose(out.data, ref_deformable(layer, q.data, ref, feat), atol=1e-6)

    def test_weights_sum_to_one_per_head(self, rng):
        feat = make_feat(rng)
        cfg = DeformAttnConfig(heads=4, levels=2, points=4, head_dim=2)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        layer.logit_w.data[:] = rng.standard_normal(layer.logit_w.shape)
        q = Tensor(rng.standard_normal((1, 5, 8)), requires_grad=True)
        _, rec = layer(q, rng.uniform(0, 1, (1, 5, 2)), feat, record=True)
        np.testing.assert_allclose(rec.weights.sum(axis=(3, 4)), 1.0, atol=1e-6)

    def test_pair_counter_counts_slots(self, rng):
        attention_pairs.reset()
        feat = make_feat(rng)
        cfg = DeformAttnConfig(heads=2, levels=2, points=3, head_dim=4)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        q = Tensor(rng.standard_normal((1, 5, 8)), requires_grad=True)
        layer(q, rng.uniform(0, 1, (1, 5, 2)), feat, tag="probe")
        assert attention_pairs.counts["probe"] == 5 * 2 * 2 * 3

    def test_out_of_square_reference_rejected(self, rng):
        feat = make_feat(rng)
        cfg = DeformAttnConfig(heads=2, levels=2, points=2, head_dim=4)
        layer = DeformableAttention(8, cfg, rng, dtype=np.float64)
        q = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
        bad = np.array([[[0.5, 0.5], [1.2, 0.5]]])
        with pytest.raises(ContractError, match="unit square"):
            layer(q, bad, feat)

    def test_padded_tokens_contribute_zero(self, rng):
        levels = [(2, 2)]
        n = 4
        toks = rng.standard_normal((1, n, 4))
        pad = np.zeros((1, n), dtype=bool)
        pad[0, 3] = True
        feat_pad = build_feature_map(levels, Tensor(toks.copy(), requires_grad=True), pad)
        toks_zeroed = toks.copy()
        toks_zeroed[0, 3] = 0.0
        feat_zero = build_feature_map(levels, Tensor(toks_zeroed, requires_grad=True))
        cfg = DeformAttnConfig(heads=1, levels=1, points=2, head_dim=4)
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        la = DeformableAttention(4, cfg, r1, dtype=np.float64)
        lb = DeformableAttention(4, cfg, r2, dtype=np.float64)
        lb.value_b.data[:] = la.value_b.data  # identical params by construction
        q = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        ref = rng.uniform(0.3, 0.7, (1, 3, 2))
        oa, _ = la(q, ref, feat_pad)
        ob, _ = lb(Tensor(q.data, requires_grad=True), ref, feat_zero)
        # nonzero value bias would leak through padded rows unless they are zeroed
        np.testing.assert_allclose(oa.data, ob.data, atol=1e-9)

    def test_gradients_match_finite_differences(self, rng):
        feat = make_feat(rng, levels=((2, 3), (2, 2)), d=4)
        cfg = DeformAttnConfig(heads=2, levels=2, points=2, head_dim=2)
        layer = DeformableAttention(4, cfg, rng, dtype=np.float64)
        layer.offset_w.data[:] = rng.standard_normal(layer.offset_w.shape) * 0.05
        layer.logit_w.data[:] = rng.standard_normal(layer.logit_w.shape) * 0.5
        q = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        ref = rng.uniform(0.25, 0.75, (1, 3, 2))
        s = Tensor(rng.standard_normal((1, 3, 4)))
        leaves = [q, feat.tokens] + [p for _, p in layer.named_parameters()]

        def loss():
            out, _ = layer(q, ref, feat)
            return T.sum_all(T.mul(out, s))

        check_gradients(loss, leaves, rng, n_coords=4, tol=1e-4)


class TestFeatureMap:
    def test_token_positions_are_cell_centers(self):
        feat = build_feature_map([(2, 3)], Tensor(np.zeros((1, 6, 2)), requires_grad=True))
        np.testing.assert_allclose(feat.pos_of[0], [0.5 / 3, 0.5 / 2])
        np.testing.assert_allclose(feat.pos_of[4], [1.5 / 3, 1.5 / 2])
        assert feat.level_of.tolist() == [0] * 6

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
    @settings(max_examples=20, deadline=None)
    def test_token_count_matches_levels(self, h0, w0, h1, w1):
        n = h0 * w0 + h1 * w1
        feat = build_feature_map([(h0, w0), (h1, w1)],
                                 Tensor(np.zeros((1, n, 2)), requires_grad=True))
        assert feat.num_tokens == n
        assert (feat.level_of == 1).sum() == h1 * w1
