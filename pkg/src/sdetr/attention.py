"""Dense and deformable attention over multi-scale token maps.

Deformable attention lets each query attend to a small set of learned
sampling points per head and level instead of every key; the sampling stage
therefore costs exactly queries*heads*levels*points query-key pairs, which a
module-level counter tracks for the complexity report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor, bilinear_sample, grid_sample  # noqa: F401  (re-export)


@dataclass
class DeformAttnConfig:
    heads: int
    levels: int
    points: int
    head_dim: int

    def __post_init__(self):
        if self.points < 1:
            raise ContractError("points per level must be >= 1")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class MultiScaleFeatureMap:
    """Flattened multi-level token set with per-token placement metadata.

    tokens: [B, N, D] with N = sum(h*w) over levels; pos_of holds the
    normalized cell-center (x, y) of each token; pad_mask marks zero-padded
    (invalid) tokens.
    """

    levels: list[tuple[int, int]]
    tokens: Tensor
    level_of: np.ndarray
    pos_of: np.ndarray
    pad_mask: np.ndarray

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def level_starts(self) -> list[int]:
        starts = [0]
        for h, w in self.levels:
            starts.append(starts[-1] + h * w)
        return starts

    def valid_counts(self) -> np.ndarray:
        return (~self.pad_mask).sum(axis=1)


def level_positions(levels: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Per-token level index and normalized (x, y) cell centers, row-major."""
    level_of = []
    pos = []
    for li, (h, w) in enumerate(levels):
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        pos.append(np.stack([(jj.ravel() + 0.5) / w, (ii.ravel() + 0.5) / h], axis=-1))
        level_of.append(np.full(h * w, li, dtype=np.int64))
    return np.concatenate(level_of), np.concatenate(pos)


def build_feature_map(levels: list[tuple[int, int]], tokens: Tensor,
                      pad_mask: np.ndarray | None = None) -> MultiScaleFeatureMap:
    n = sum(h * w for h, w in levels)
    if tokens.ndim != 3 or tokens.shape[1] != n:
        raise ShapeError(f"tokens {tokens.shape} do not match levels with {n} cells")
    level_of, pos_of = level_positions(levels)
    if pad_mask is None:
        pad_mask = np.zeros((tokens.shape[0], n), dtype=bool)
    return MultiScaleFeatureMap(levels=list(levels), tokens=tokens,
                                level_of=level_of, pos_of=pos_of, pad_mask=pad_mask)


@dataclass
class AttentionRecord:
    """Detached cross-attention geometry of one deformable attention call.

    ref: [B, Q, 2]; locations: [B, Q, H, L, K, 2] (normalized, ref+offset);
    weights: [B, Q, H, L, K], softmax-normalized per head so each head's
    L*K slots sum to one.
    """

    ref: np.ndarray
    locations: np.ndarray
    weights: np.ndarray


class PairCounter:
    """Counts attended query-key pairs per tag, for complexity accounting."""

    def __init__(self):
        self.counts: dict[str, int] = {}
        self.enabled = True

    def add(self, tag: str, pairs: int) -> None:
        if self.enabled:
            self.counts[tag] = self.counts.get(tag, 0) + int(pairs)

    def reset(self) -> None:
        self.counts = {}

    def total(self) -> int:
        return sum(self.counts.values())


attention_pairs = PairCounter()


_NEG_INF = -1e9


def dense_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
                    pad_mask: np.ndarray | None = None, tag: str = "dense") -> Tensor:
    """Scaled dot-product attention; q/k/v are [Nq, D] / [Nk, D] or batched.

    The weight matrix has Nq*Nk entries per head; the pair counter is bumped
    by Nq*Nk per batch element.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, nq, d = q.shape
    nk = k.shape[1]
    if k.shape != (b, nk, d) or v.shape != (b, nk, d):
        raise ShapeError(f"dense_attention: shapes {q.shape}/{k.shape}/{v.shape} disagree")
    if d % heads:
        raise ShapeError(f"dense_attention: width {d} not divisible by {heads} heads")
    hd = d // heads
    attention_pairs.add(tag, b * nq * nk)

    def split(t, n):
        return T.transpose(T.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    logits = T.mul_scalar(T.bmm(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if pad_mask is not None and pad_mask.any():
        bias = np.where(pad_mask, _NEG_INF, 0.0).astype(logits.data.dtype)
        logits = T.add(logits, T.const(np.broadcast_to(bias[:, None, None, :], logits.shape)))
    weights = T.softmax(logits, axis=-1)
    out = T.bmm(weights, vh)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, nq, d))
    if squeeze:
        out = T.reshape(out, (nq, d))
    return out


class DeformableAttention:
    """Multi-scale deformable attention with learned offsets and weights.

    Offsets are produced in normalized units and added to the reference
    point before per-level pixel conversion; both offset and weight heads
    start at zero so training begins by sampling uniformly at the reference
    points.
    """

    def __init__(self, dim: int, cfg: DeformAttnConfig, rng: np.random.Generator,
                 dtype=np.float32):
        if cfg.heads * cfg.head_dim != dim:
            raise ShapeError(f"heads*head_dim {cfg.heads}*{cfg.head_dim} != dim {dim}")
        self.cfg = cfg
        self.dim = dim
        nslots = cfg.heads * cfg.levels * cfg.points
        def xavier(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            return T.parameter(rng.uniform(-bound, bound, shape), dtype=dtype)

        self.value_w = xavier((dim, dim))
        self.value_b = T.parameter(np.zeros(dim), dtype=dtype)
        self.offset_w = T.parameter(np.zeros((dim, nslots * 2)), dtype=dtype)
        self.offset_b = T.parameter(np.zeros(nslots * 2), dtype=dtype)
        self.logit_w = T.parameter(np.zeros((dim, nslots)), dtype=dtype)
        self.logit_b = T.parameter(np.zeros(nslots), dtype=dtype)
        self.out_w = xavier((dim, dim))
        self.out_b = T.parameter(np.zeros(dim), dtype=dtype)

    def named_parameters(self):
        return [("value_w", self.value_w), ("value_b", self.value_b),
                ("offset_w", self.offset_w), ("offset_b", self.offset_b),
                ("logit_w", self.logit_w), ("logit_b", self.logit_b),
                ("out_w", self.out_w), ("out_b", self.out_b)]

    def __call__(self, queries: Tensor, ref_points: np.ndarray, feat: MultiScaleFeatureMap,
                 record: bool = False, tag: str = "deformable"):
        cfg = self.cfg
        b, nq, d = queries.shape
        h_, l_, k_, hd = cfg.heads, cfg.levels, cfg.points, cfg.head_dim
        if len(feat.levels) != l_:
            raise ShapeError(f"feature map has {len(feat.levels)} levels, config says {l_}")
        ref_points = np.asarray(ref_points)
        if ref_points.shape != (b, nq, 2):
            raise ShapeError(f"ref_points {ref_points.shape} do not match queries {queries.shape}")
        if not np.all(np.isfinite(ref_points)) or ref_points.min() < 0.0 or ref_points.max() > 1.0:
            raise ContractError("reference points must lie inside the unit square")
        attention_pairs.add(tag, b * nq * h_ * l_ * k_)

        value = T.linear(feat.tokens, self.value_w, self.value_b)
        if feat.pad_mask.any():
            keep = np.broadcast_to((~feat.pad_mask)[:, :, None], value.shape)
            value = T.mul(value, T.const(keep.astype(value.data.dtype)))

        offsets = T.reshape(T.linear(queries, self.offset_w, self.offset_b),
                            (b, nq, h_, l_, k_, 2))
        ref_bc = np.broadcast_to(ref_points[:, :, None, None, None, :], offsets.shape)
        locations = T.add(offsets, T.const(ref_bc.astype(offsets.data.dtype)))
        logits = T.reshape(T.linear(queries, self.logit_w, self.logit_b), (b, nq, h_, l_ * k_))
        weights = T.softmax(logits, axis=-1)  # per head over its L*K slots

        starts = feat.level_starts
        sampled_levels = []
        for li, (gh, gw) in enumerate(feat.levels):
            vl = T.slice_axis(value, 1, starts[li], starts[li + 1])
            vl = T.reshape(vl, (b, gh, gw, h_, hd))
            vl = T.reshape(T.transpose(vl, (0, 3, 1, 2, 4)), (b * h_, gh, gw, hd))
            ll = T.reshape(T.slice_axis(locations, 3, li, li + 1), (b, nq, h_, k_, 2))
            ll = T.reshape(T.transpose(ll, (0, 2, 1, 3, 4)), (b * h_, nq * k_, 2))
            sampled = T.grid_sample(vl, ll)
            sampled_levels.append(T.reshape(sampled, (b * h_, nq, k_, hd)))
        samples = T.concat(sampled_levels, axis=2)  # [B*H, Nq, L*K, hd]
        samples = T.reshape(samples, (b * h_ * nq, l_ * k_, hd))
        wrow = T.reshape(T.transpose(T.reshape(weights, (b, nq, h_, l_ * k_)), (0, 2, 1, 3)),
                         (b * h_ * nq, 1, l_ * k_))
        mixed = T.reshape(T.bmm(wrow, samples), (b, h_, nq, hd))
        mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, nq, d))
        out = T.linear(mixed, self.out_w, self.out_b)

        rec = None
        if record:
            rec = AttentionRecord(
                ref=ref_points.copy(),
                locations=locations.data.copy(),
                weights=weights.data.reshape(b, nq, h_, l_, k_).copy(),
            )
        return out, rec
