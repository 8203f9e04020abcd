"""Token saliency: scoring network, decoder-attention-map targets, selection.

The decoder attention map (dam) accumulates, per encoder token, the
cross-attention mass that decoder queries place near it; its top-rho
binarization is the training target of the scoring network. Selection is a
hard top-rho cut and is never differentiated through: the scoring network
learns only from the saliency objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from ._kernels import scatter_add_flat
from .attention import AttentionRecord, MultiScaleFeatureMap
from .tensor import ContractError, Tensor


@dataclass
class SelectionMask:
    """The salient token set: per-image boolean mask plus its cardinality."""

    rho: float
    selected: np.ndarray  # [B, N] bool
    counts: np.ndarray    # [B] number selected per image


def required_count(rho: float, n_valid: int) -> int:
    """ceil(rho * n_valid), robust to float noise in rho (0.3*80 is 24, not 25)."""
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"keeping ratio must be in [0, 1], got {rho}")
    return int(np.ceil(round(rho * n_valid, 6)))


def select_top_rho(scores: np.ndarray, rho: float, pad_mask: np.ndarray) -> SelectionMask:
    """Keep the ceil(rho * n_valid) highest-scoring valid tokens per image.

    Ties break toward the lower token index; padded tokens are never selected.
    """
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[None]
        pad_mask = np.asarray(pad_mask)[None]
    b, n = scores.shape
    masked = np.where(pad_mask, -np.inf, scores)
    selected = np.zeros((b, n), dtype=bool)
    counts = np.zeros(b, dtype=np.int64)
    for i in range(b):
        n_valid = int((~pad_mask[i]).sum())
        s = required_count(rho, n_valid)
        counts[i] = s
        if s:
            order = np.argsort(-masked[i], kind="stable")
            selected[i, order[:s]] = True
    return SelectionMask(rho=rho, selected=selected, counts=counts)


def random_selection(rho: float, pad_mask: np.ndarray, seed) -> SelectionMask:
    """Uniform sample (without replacement) of valid tokens; seed-deterministic.

    ``seed`` is one int for the whole batch or a per-image int sequence,
    which keeps evaluation independent of batch composition.
    """
    pad_mask = np.asarray(pad_mask)
    if pad_mask.ndim == 1:
        pad_mask = pad_mask[None]
    b, n = pad_mask.shape
    seed_arr = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    if seed_arr.size == 1:
        shared = np.random.default_rng(int(seed_arr[0]))
        gens = [shared] * b
    elif seed_arr.size == b:
        gens = [np.random.default_rng(int(s)) for s in seed_arr]
    else:
        raise ContractError(f"seed must be scalar or one per image, got {seed_arr.size} for batch {b}")
    selected = np.zeros((b, n), dtype=bool)
    counts = np.zeros(b, dtype=np.int64)
    for i in range(b):
        valid = np.flatnonzero(~pad_mask[i])
        s = required_count(rho, len(valid))
        counts[i] = s
        if s:
            pick = gens[i].choice(valid, size=s, replace=False)
            selected[i, pick] = True
    return SelectionMask(rho=rho, selected=selected, counts=counts)


class ScoringNetwork:
    """Per-token saliency logit with a pooled global feature branch.

    Four linear layers (widths 256, 128, 64, 1) with layer normalization
    before the first and GELU after all but the last; half of the first
    layer's output is averaged over valid tokens and re-concatenated with
    each token's local half, so the head sees both local and global context
    and stays permutation-equivariant.
    """

    WIDTHS = (256, 128, 64, 1)

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        def xavier(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return T.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype=dtype)

        w1, w2, w3, w4 = self.WIDTHS
        self.ln_g = T.parameter(np.ones(dim), dtype=dtype)
        self.ln_b = T.parameter(np.zeros(dim), dtype=dtype)
        self.w1 = xavier(dim, w1)
        self.b1 = T.parameter(np.zeros(w1), dtype=dtype)
        self.w2 = xavier(w1, w2)
        self.b2 = T.parameter(np.zeros(w2), dtype=dtype)
        self.w3 = xavier(w2, w3)
        self.b3 = T.parameter(np.zeros(w3), dtype=dtype)
        self.w4 = xavier(w3, w4)
        self.b4 = T.parameter(np.zeros(w4), dtype=dtype)

    def named_parameters(self):
        return [("ln_g", self.ln_g), ("ln_b", self.ln_b),
                ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2),
                ("w3", self.w3), ("b3", self.b3), ("w4", self.w4), ("b4", self.b4)]

    def __call__(self, feat: MultiScaleFeatureMap) -> Tensor:
        b, n, _ = feat.tokens.shape
        half = self.WIDTHS[0] // 2
        x = T.layer_norm(feat.tokens, self.ln_g, self.ln_b)
        h = T.gelu(T.linear(x, self.w1, self.b1))
        local = T.slice_axis(h, -1, 0, half)
        glob = T.slice_axis(h, -1, half, 2 * half)
        valid = ~feat.pad_mask
        if feat.pad_mask.any():
            keep = np.broadcast_to(valid[:, :, None], glob.shape).astype(glob.data.dtype)
            glob = T.mul(glob, T.const(keep))
        counts = valid.sum(axis=1).astype(glob.data.dtype)
        gsum = T.sum_axis(glob, 1, keepdims=True)
        inv = np.broadcast_to((1.0 / np.maximum(counts, 1.0))[:, None, None], gsum.shape)
        gmean = T.mul(gsum, T.const(inv.astype(glob.data.dtype)))
        ones = T.const(np.ones((b, n, 1), dtype=glob.data.dtype))
        gtok = T.bmm(ones, gmean)  # broadcast the pooled feature to every token
        z = T.concat([local, gtok], axis=-1)
        h = T.gelu(T.linear(z, self.w2, self.b2))
        h = T.gelu(T.linear(h, self.w3, self.b3))
        return T.reshape(T.linear(h, self.w4, self.b4), (b, n))


def score_tokens(net: ScoringNetwork, feat: MultiScaleFeatureMap) -> Tensor:
    """One saliency logit per token (selection masks padded tokens to -inf)."""
    return net(feat)


def objectness_scores(head, feat: MultiScaleFeatureMap) -> np.ndarray:
    """Max class probability per token from a detection head; detached."""
    logits = head(feat)
    return expit(logits.data).max(axis=-1)


# ---------------------------------------------------------------------------
# decoder attention map
# ---------------------------------------------------------------------------

def build_dam(records: list[AttentionRecord], feat: MultiScaleFeatureMap,
              kernel: str = "bilinear") -> np.ndarray:
    """Accumulate decoder cross-attention mass onto encoder token locations.

    Every sampled (weight, location) splats weight * bilinear-kernel onto the
    <=4 enclosing integer cells of its level ('bilinear'), or all of its
    weight onto the nearest cell ('nearest'); out-of-grid mass is dropped.
    Output is a detached [B, N] map summed over layers, queries, heads and
    points.
    """
    if kernel not in ("bilinear", "nearest"):
        raise ContractError(f"unknown dam kernel {kernel!r}")
    b = feat.batch
    n = feat.num_tokens
    dam = np.zeros(b * n, dtype=np.float64)
    starts = feat.level_starts
    for rec in records:
        bb, q, h, l, k, _ = rec.locations.shape
        for li, (gh, gw) in enumerate(feat.levels):
            loc = rec.locations[:, :, :, li].reshape(b, -1, 2)
            wgt = rec.weights[:, :, :, li].reshape(b, -1).astype(np.float64)
            px = loc[..., 0] * gw - 0.5
            py = loc[..., 1] * gh - 0.5
            boff = (np.arange(b, dtype=np.int64) * n + starts[li])[:, None]
            if kernel == "nearest":
                ix = np.floor(px + 0.5).astype(np.int64)
                iy = np.floor(py + 0.5).astype(np.int64)
                m = (ix >= 0) & (ix < gw) & (iy >= 0) & (iy < gh)
                idx = boff + np.clip(iy, 0, gh - 1) * gw + np.clip(ix, 0, gw - 1)
                scatter_add_flat(dam, idx, wgt * m)
                continue
            x0 = np.floor(px).astype(np.int64)
            y0 = np.floor(py).astype(np.int64)
            fx = px - x0
            fy = py - y0
            for cx, cy, cw in ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
                               (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)):
                m = (cx >= 0) & (cx < gw) & (cy >= 0) & (cy < gh)
                idx = boff + np.clip(cy, 0, gh - 1) * gw + np.clip(cx, 0, gw - 1)
                scatter_add_flat(dam, idx, wgt * cw * m)
    dam = dam.reshape(b, n)
    dam[feat.pad_mask] = 0.0
    return dam


def binarize_dam(dam: np.ndarray, rho: float, pad_mask: np.ndarray) -> np.ndarray:
    """Top-rho cut of the dam values; exactly ceil(rho * n_valid) true per image."""
    return select_top_rho(dam, rho, pad_mask).selected


# ---------------------------------------------------------------------------
# scoring objectives
# ---------------------------------------------------------------------------

def _softplus(x: Tensor) -> Tensor:
    return T.add(T.relu(x), T.log(T.add_scalar(T.exp(T.neg(T.abs_(x))), 1.0)))


def saliency_loss(logits: Tensor, target: np.ndarray, kind: str,
                  pad_mask: np.ndarray, rng: np.random.Generator | None = None,
                  ranking_margin: float = 1.0) -> Tensor:
    """Scoring-network objective against a detached dam-derived target.

    bce: mean binary cross entropy between sigmoid(logit) and the binarized
    dam. smooth_l1: mean smoothed-L1 between sigmoid(logit) and the per-image
    min-max normalized dam. ranking: mean hinge over sampled pairs ordered by
    dam value. Padded tokens are excluded from every mean.
    """
    dtype = logits.data.dtype
    valid = ~np.asarray(pad_mask)
    n_valid = int(valid.sum())
    if kind == "bce":
        z = np.asarray(target, dtype=dtype)
        pos = T.mul(_softplus(T.neg(logits)), T.const((z * valid).astype(dtype)))
        neg = T.mul(_softplus(logits), T.const(((1.0 - z) * valid).astype(dtype)))
        return T.mul_scalar(T.sum_all(T.add(pos, neg)), 1.0 / max(n_valid, 1))
    if kind == "smooth_l1":
        t = np.asarray(target, dtype=np.float64).copy()
        for i in range(t.shape[0] if t.ndim == 2 else 1):
            row = t[i] if t.ndim == 2 else t
            vrow = valid[i] if valid.ndim == 2 else valid
            lo, hi = row[vrow].min(), row[vrow].max()
            if hi > lo:
                row[vrow] = (row[vrow] - lo) / (hi - lo)
            else:
                row[vrow] = 0.0
        d = T.sub(T.sigmoid(logits), T.const(t.astype(dtype)))
        a = T.abs_(d)
        quad = T.mul_scalar(T.mul(d, d), 0.5)
        lin = T.add_scalar(a, -0.5)
        near = (np.abs(d.data) < 1.0)  # detached region switch; C1 at the joint
        sl1 = T.add(T.mul(quad, T.const((near * valid).astype(dtype))),
                    T.mul(lin, T.const((~near * valid).astype(dtype))))
        return T.mul_scalar(T.sum_all(sl1), 1.0 / max(n_valid, 1))
    if kind == "ranking":
        if rng is None:
            rng = np.random.default_rng(0)
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 1:
            t = t[None]
        b, n = t.shape
        flat = T.reshape(logits, (b, n, 1))
        hi_list, lo_list = [], []
        for i in range(b):
            vidx = np.flatnonzero(valid[i] if valid.ndim == 2 else valid)
            if len(vidx) < 2:
                continue
            n_pairs = 4 * len(vidx)
            ii = rng.choice(vidx, size=n_pairs)
            jj = rng.choice(vidx, size=n_pairs)
            ti, tj = t[i, ii], t[i, jj]
            keep = ti != tj
            ii, jj, ti, tj = ii[keep], jj[keep], ti[keep], tj[keep]
            swap = ti < tj
            ii[swap], jj[swap] = jj[swap], ii[swap]
            hi_list.append((i, ii))
            lo_list.append((i, jj))
        total_pairs = sum(len(ii) for _, ii in hi_list)
        if total_pairs == 0:
            return T.mul_scalar(T.sum_all(logits), 0.0)
        losses = []
        for (i, ii), (_, jj) in zip(hi_list, lo_list):
            row = T.slice_axis(flat, 0, i, i + 1)
            hi = T.gather_tokens(row, ii[None])
            lo = T.gather_tokens(row, jj[None])
            losses.append(T.sum_all(T.relu(T.add_scalar(T.neg(T.sub(hi, lo)), ranking_margin))))
        acc = losses[0]
        for extra in losses[1:]:
            acc = T.add(acc, extra)
        return T.mul_scalar(acc, 1.0 / total_pairs)
    raise ContractError(f"unknown saliency loss kind {kind!r}")


# ---------------------------------------------------------------------------
# binary dumps
# ---------------------------------------------------------------------------

def _write_level_header(f, levels) -> None:
    f.write(struct.pack("<I", len(levels)))
    for h, w in levels:
        f.write(struct.pack("<II", h, w))


def dump_selection_mask(mask_row: np.ndarray, levels, path: str) -> None:
    """Header (u32 level count, u32 h/w per level) then one u8 per token."""
    with open(path, "wb") as f:
        _write_level_header(f, levels)
        f.write(np.asarray(mask_row, dtype=np.uint8).tobytes())


def dump_dam(dam_row: np.ndarray, levels, path: str) -> None:
    """Header (u32 level count, u32 h/w per level) then one f32 per token."""
    with open(path, "wb") as f:
        _write_level_header(f, levels)
        f.write(np.asarray(dam_row, dtype="<f4").tobytes())
