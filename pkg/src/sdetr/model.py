"""Full detector assembly: backbone stub, sparse encoder, decoder, objective.

The encoder refines only the selected tokens; everything else is passed
through each layer bit-for-bit unchanged, while still being visible to the
selected queries as sampling targets. Decoder queries are initialized from
the top-k encoder outputs by class score, and every auxiliary head (encoder
layers, decoder layers, the top-k head, the objectness head) trains with the
same matched set loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import tensor as T
from . import matching as M
from .attention import (AttentionRecord, DeformAttnConfig, DeformableAttention,
                        MultiScaleFeatureMap, build_feature_map, dense_attention,
                        level_positions)
from .saliency import (ScoringNetwork, SelectionMask, binarize_dam, build_dam,
                       random_selection, saliency_loss, score_tokens, select_top_rho)
from .tensor import ContractError, ShapeError, Tensor

CRITERIA = ("random", "os", "dam")
NORM_PLACEMENTS = ("post_ln", "pre_ln")
SALIENCY_KINDS = ("bce", "smooth_l1", "ranking")
LOSS_WEIGHTS = {"cls": 2.0, "l1": 5.0, "giou": 2.0}
_FOCAL_PRIOR_BIAS = -4.59511985013459  # -log((1-p)/p), p=0.01
_PROPOSAL_BASE_SIZE = 0.1


@dataclass
class ModelConfig:
    rho: float = 0.5
    criterion: str = "dam"
    encoder_layers: int = 3
    decoder_layers: int = 3
    dim: int = 64
    heads: int = 4
    levels: int = 2
    points: int = 4
    num_queries: int = 16
    num_classes: int = 3
    topk_queries: int = 16
    use_bbox_refine: bool = True
    use_encoder_aux: bool = True
    norm_placement: str = "post_ln"
    dam_loss_kind: str = "bce"
    dam_loss_weight: float = 1.0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ContractError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ContractError(f"norm_placement must be one of {NORM_PLACEMENTS}")
        if self.dam_loss_kind not in SALIENCY_KINDS:
            raise ContractError(f"dam_loss_kind must be one of {SALIENCY_KINDS}")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {self.rho}")
        if self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ContractError("encoder_layers must be >= 0 and decoder_layers >= 1")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.topk_queries != self.num_queries:
            raise ContractError("decoder queries are the top-k tokens: set topk_queries == num_queries")

    def attn(self) -> DeformAttnConfig:
        return DeformAttnConfig(heads=self.heads, levels=self.levels, points=self.points,
                                head_dim=self.dim // self.heads)


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


def sine_position_embedding(pos: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sine/cosine embedding of normalized (x, y) positions, [..., dim]."""
    if dim % 4:
        raise ContractError(f"position embedding width must divide 4, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (2 * np.arange(half // 2) / half)
    out = np.zeros(pos.shape[:-1] + (dim,))
    for coord, offset in ((pos[..., 1], 0), (pos[..., 0], half)):  # y block, then x
        ang = coord[..., None] * 2 * np.pi / freqs
        out[..., offset:offset + half:2] = np.sin(ang)
        out[..., offset + 1:offset + half:2] = np.cos(ang)
    return out


class Linear:
    def __init__(self, d_in: int, d_out: int, rng, dtype, zero: bool = False,
                 bias_init: float = 0.0):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, (d_in, d_out))
        self.w = T.parameter(w, dtype=dtype)
        self.b = T.parameter(np.full(d_out, bias_init), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_parameters(self):
        return [("w", self.w), ("b", self.b)]


class LayerNorm:
    def __init__(self, dim: int, dtype):
        self.g = T.parameter(np.ones(dim), dtype=dtype)
        self.b = T.parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)

    def named_parameters(self):
        return [("g", self.g), ("b", self.b)]


class FFN:
    def __init__(self, dim: int, rng, dtype):
        self.fc1 = Linear(dim, 2 * dim, rng, dtype)
        self.fc2 = Linear(2 * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def named_parameters(self):
        return _prefix("fc1", self.fc1) + _prefix("fc2", self.fc2)


class MLP:
    """Three-layer box head; the final layer starts at zero so initial boxes
    equal their proposals."""

    def __init__(self, dim: int, d_out: int, rng, dtype):
        self.fc1 = Linear(dim, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)
        self.fc3 = Linear(dim, d_out, rng, dtype, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc3(T.relu(self.fc2(T.relu(self.fc1(x)))))

    def named_parameters(self):
        return _prefix("fc1", self.fc1) + _prefix("fc2", self.fc2) + _prefix("fc3", self.fc3)


def _prefix(name: str, mod) -> list:
    return [(f"{name}.{k}", v) for k, v in mod.named_parameters()]


class DetectionHead:
    """Class logits plus proposal-relative box regression."""

    def __init__(self, dim: int, num_classes: int, rng, dtype):
        self.cls = Linear(dim, num_classes, rng, dtype, bias_init=_FOCAL_PRIOR_BIAS)
        self.box = MLP(dim, 4, rng, dtype)

    def __call__(self, tokens: Tensor, proposals: np.ndarray) -> tuple[Tensor, Tensor]:
        logits = self.cls(tokens)
        delta = self.box(tokens)
        base = inverse_sigmoid(np.asarray(proposals)).astype(delta.data.dtype)
        boxes = T.sigmoid(T.add(delta, T.const(np.broadcast_to(base, delta.shape))))
        return logits, boxes

    def named_parameters(self):
        return _prefix("cls", self.cls) + _prefix("box", self.box)


# ---------------------------------------------------------------------------
# backbone stub
# ---------------------------------------------------------------------------

class Conv2d:
    """Strided 3x3 convolution built from an index-gather and a matmul."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, 3, stride
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / (fan_in + c_out))
        self.w = T.parameter(rng.uniform(-bound, bound, (fan_in, c_out)), dtype=dtype)
        self.b = T.parameter(np.zeros(c_out), dtype=dtype)
        self._idx_cache: dict[tuple[int, int], tuple[np.ndarray, int, int]] = {}

    def _indices(self, h: int, w: int):
        key = (h, w)
        if key not in self._idx_cache:
            k, s, pad = self.k, self.stride, 1
            oh = (h + 2 * pad - k) // s + 1
            ow = (w + 2 * pad - k) // s + 1
            oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
            ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
            iy = oy.reshape(-1, 1, 1, 1) * s - pad + ky.reshape(1, 1, k, k)
            ix = ox.reshape(-1, 1, 1, 1) * s - pad + kx.reshape(1, 1, k, k)
            ci = np.arange(self.c_in).reshape(1, -1, 1, 1)
            flat = (ci * h + iy) * w + ix
            oob = (iy < 0) | (iy >= h) | (ix < 0) | (ix >= w)
            flat = np.where(np.broadcast_to(oob, flat.shape), self.c_in * h * w, flat)
            self._idx_cache[key] = (flat.reshape(oh * ow, -1), oh, ow)
        return self._idx_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        bsz, c, h, w = x.shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        idx, oh, ow = self._indices(h, w)
        flat = T.reshape(x, (bsz, c * h * w))
        # out-of-bounds taps read a trailing zero slot (zero padding)
        flat = T.concat([flat, T.const(np.zeros((bsz, 1), dtype=x.data.dtype))], axis=1)
        cols = T.take_cols(flat, idx)                 # [B, OH*OW, 9*C]
        out = T.linear(cols, self.w, self.b)          # [B, OH*OW, C_out]
        return T.transpose(T.reshape(out, (bsz, oh, ow, self.c_out)), (0, 3, 1, 2))

    def named_parameters(self):
        return [("w", self.w), ("b", self.b)]


class BackboneStub:
    """Small strided conv stack producing two token levels (strides 8 and 16)."""

    STRIDES = (8, 16)

    def __init__(self, cfg: ModelConfig, rng, dtype):
        d = cfg.dim
        self.cfg = cfg
        self.conv1 = Conv2d(3, 8, 2, rng, dtype)
        self.conv2 = Conv2d(8, 16, 2, rng, dtype)
        self.conv3 = Conv2d(16, 32, 2, rng, dtype)
        self.conv4 = Conv2d(32, 64, 2, rng, dtype)
        self.proj0 = Linear(32, d, rng, dtype)
        self.proj1 = Linear(64, d, rng, dtype)
        self.level_embed = T.parameter(rng.normal(0.0, 0.02, (cfg.levels, d)), dtype=dtype)
        self._pos_cache: dict[tuple, np.ndarray] = {}

    def named_parameters(self):
        out = []
        for name in ("conv1", "conv2", "conv3", "conv4", "proj0", "proj1"):
            out += _prefix(name, getattr(self, name))
        out.append(("level_embed", self.level_embed))
        return out

    def __call__(self, images: Tensor, pad_mask: np.ndarray | None = None) -> MultiScaleFeatureMap:
        bsz, c, h, w = images.shape
        if h % self.STRIDES[-1] or w % self.STRIDES[-1]:
            raise ContractError(f"image dims {h}x{w} must divide the coarsest stride "
                                f"{self.STRIDES[-1]}")
        x = T.relu(self.conv1(images))
        x = T.relu(self.conv2(x))
        f0 = T.relu(self.conv3(x))            # stride 8
        f1 = T.relu(self.conv4(f0))           # stride 16
        levels = [(h // 8, w // 8), (h // 16, w // 16)]

        def tokens_of(fmap: Tensor, proj: Linear) -> Tensor:
            b_, c_, fh, fw = fmap.shape
            t = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b_, fh * fw, c_))
            return proj(t)

        toks = T.concat([tokens_of(f0, self.proj0), tokens_of(f1, self.proj1)], axis=1)
        n = toks.shape[1]
        level_of, pos_of = level_positions(levels)
        key = tuple(levels)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_position_embedding(pos_of, self.cfg.dim)
        pos_embed = self._pos_cache[key].astype(toks.data.dtype)
        toks = T.add(toks, T.const(np.broadcast_to(pos_embed, toks.shape)))
        onehot = np.zeros((n, self.cfg.levels), dtype=toks.data.dtype)
        onehot[np.arange(n), level_of] = 1.0
        lvl = T.reshape(T.matmul(T.const(onehot), self.level_embed), (n * self.cfg.dim,))
        toks = T.reshape(T.add_bias(T.reshape(toks, (bsz, n * self.cfg.dim)), lvl),
                         (bsz, n, self.cfg.dim))
        return build_feature_map(levels, toks, pad_mask)


# ---------------------------------------------------------------------------
# encoder / decoder layers
# ---------------------------------------------------------------------------

class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.attn = DeformableAttention(cfg.dim, cfg.attn(), rng, dtype)
        self.ln1 = LayerNorm(cfg.dim, dtype)
        self.ln2 = LayerNorm(cfg.dim, dtype)
        self.ffn = FFN(cfg.dim, rng, dtype)

    def named_parameters(self):
        return (_prefix("attn", self.attn) + _prefix("ln1", self.ln1)
                + _prefix("ln2", self.ln2) + _prefix("ffn", self.ffn))

    def _refine(self, queries: Tensor, ref: np.ndarray, feat: MultiScaleFeatureMap,
                norm: str) -> Tensor:
        if norm == "pre_ln":
            qn = self.ln1(queries)
            vfeat = MultiScaleFeatureMap(feat.levels, self.ln1(feat.tokens),
                                         feat.level_of, feat.pos_of, feat.pad_mask)
            attn, _ = self.attn(qn, ref, vfeat, tag="encoder_deform")
            z = T.add(queries, attn)
            return T.add(z, self.ffn(self.ln2(z)))
        attn, _ = self.attn(queries, ref, feat, tag="encoder_deform")
        z = self.ln1(T.add(queries, attn))
        return self.ln2(T.add(z, self.ffn(z)))

    def __call__(self, tokens: Tensor, sel_idx: np.ndarray | None,
                 feat: MultiScaleFeatureMap, norm: str = "post_ln") -> Tensor:
        """Update selected tokens; every other token passes through unchanged.

        sel_idx is [B, S] (None means all tokens). The value map is the full
        current token set, so unselected tokens still serve as keys.
        """
        cur = MultiScaleFeatureMap(feat.levels, tokens, feat.level_of, feat.pos_of,
                                   feat.pad_mask)
        if sel_idx is None:
            ref = np.broadcast_to(feat.pos_of, (tokens.shape[0],) + feat.pos_of.shape)
            return self._refine(tokens, ref, cur, norm)
        if sel_idx.shape[1] == 0:
            return tokens
        queries = T.gather_tokens(tokens, sel_idx)
        ref = feat.pos_of[sel_idx]
        refined = self._refine(queries, ref, cur, norm)
        return T.scatter_tokens(tokens, sel_idx, refined)


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        d = cfg.dim
        self.heads = cfg.heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.cross = DeformableAttention(d, cfg.attn(), rng, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ln3 = LayerNorm(d, dtype)
        self.ffn = FFN(d, rng, dtype)

    def named_parameters(self):
        out = []
        for name in ("q", "k", "v", "o", "cross", "ln1", "ln2", "ln3", "ffn"):
            out += _prefix(name, getattr(self, name))
        return out

    def __call__(self, qf: Tensor, ref_boxes: np.ndarray, enc: MultiScaleFeatureMap,
                 record: bool = True) -> tuple[Tensor, AttentionRecord | None]:
        dtype = qf.data.dtype
        centers = ref_boxes[..., :2]
        qpos = T.const(sine_position_embedding(centers, qf.shape[-1]).astype(dtype))
        qk = T.add(qf, qpos)
        sa = dense_attention(self.q(qk), self.k(qk), self.v(qf), heads=self.heads,
                             tag="decoder_dense")
        qf = self.ln1(T.add(qf, self.o(sa)))
        cq = T.add(qf, qpos)
        ca, rec = self.cross(cq, centers, enc, record=record, tag="decoder_deform")
        qf = self.ln2(T.add(qf, ca))
        qf = self.ln3(T.add(qf, self.ffn(qf)))
        return qf, rec


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------

@dataclass
class ForwardPlan:
    """Detached decisions of one forward pass (selection, query choice,
    reference boxes). Replaying a plan freezes every stop-gradient so the
    loss becomes a smooth function of the parameters, which finite-difference
    checks require."""

    selection: SelectionMask
    topk_idx: np.ndarray
    ref_boxes: list[np.ndarray]


@dataclass
class ForwardOutputs:
    final: tuple[Tensor, Tensor]                  # class logits [B,M,C], boxes [B,M,4]
    dec_outputs: list[tuple[Tensor, Tensor]]      # every decoder layer incl. final
    enc_aux: list[tuple[Tensor, Tensor, np.ndarray]]   # per layer: logits, boxes, sel_idx
    topk_out: tuple[Tensor, Tensor]               # top-k head over all tokens
    os_out: tuple[Tensor, Tensor] | None
    scoring_logits: Tensor | None
    selection: SelectionMask
    records: list[AttentionRecord]
    feat: MultiScaleFeatureMap                    # backbone features
    enc_feat: MultiScaleFeatureMap                # encoder output features
    topk_idx: np.ndarray
    rho: float
    plan: ForwardPlan | None = None
    dam: np.ndarray | None = None


class SparseDetector:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng([seed, 0x5D37])
        self.backbone = BackboneStub(cfg, rng, dtype)
        self.scoring_net = ScoringNetwork(cfg.dim, rng, dtype) if cfg.criterion == "dam" else None
        self.os_head = DetectionHead(cfg.dim, cfg.num_classes, rng, dtype) \
            if cfg.criterion == "os" else None
        self.enc_layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.encoder_layers)]
        self.enc_aux_heads = [DetectionHead(cfg.dim, cfg.num_classes, rng, dtype)
                              for _ in range(cfg.encoder_layers)] if cfg.use_encoder_aux else []
        self.topk_head = DetectionHead(cfg.dim, cfg.num_classes, rng, dtype)
        self.query_proj = Linear(cfg.dim, cfg.dim, rng, dtype)
        self.query_norm = LayerNorm(cfg.dim, dtype)
        self.dec_layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.decoder_layers)]
        self.dec_heads = [DetectionHead(cfg.dim, cfg.num_classes, rng, dtype)
                          for _ in range(cfg.decoder_layers)]
        self._forward_count = 0
        self._proposal_cache: dict[tuple, np.ndarray] = {}

    # -- parameters ---------------------------------------------------------
    def layer_groups(self) -> list[tuple[str, list[tuple[str, Tensor]]]]:
        groups = [
            ("B1", _prefix("backbone.conv1", self.backbone.conv1)),
            ("B2", _prefix("backbone.conv2", self.backbone.conv2)),
            ("B3", _prefix("backbone.conv3", self.backbone.conv3)),
            ("B4", _prefix("backbone.conv4", self.backbone.conv4)),
            ("B5", _prefix("backbone.proj0", self.backbone.proj0)
             + _prefix("backbone.proj1", self.backbone.proj1)
             + [("backbone.level_embed", self.backbone.level_embed)]),
        ]
        for i, layer in enumerate(self.enc_layers):
            groups.append((f"E{i + 1}", _prefix(f"encoder.{i}", layer)))
        for i, layer in enumerate(self.dec_layers):
            groups.append((f"D{i + 1}", _prefix(f"decoder.{i}", layer)))
        heads = _prefix("topk_head", self.topk_head)
        heads += _prefix("query_proj", self.query_proj)
        heads += _prefix("query_norm", self.query_norm)
        if self.scoring_net is not None:
            heads += _prefix("scoring_net", self.scoring_net)
        if self.os_head is not None:
            heads += _prefix("os_head", self.os_head)
        for i, head in enumerate(self.enc_aux_heads):
            heads += _prefix(f"enc_aux_head.{i}", head)
        for i, head in enumerate(self.dec_heads):
            heads += _prefix(f"dec_head.{i}", head)
        groups.append(("H0", heads))
        return groups

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, p) for _, params in self.layer_groups() for name, p in params]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def save(self, path: str) -> None:
        T.save_parameters(self.named_parameters(), path)

    def load(self, path: str) -> None:
        loaded = T.load_parameters(path)
        for name, p in self.named_parameters():
            if name not in loaded:
                raise ContractError(f"checkpoint missing parameter {name}")
            if loaded[name].shape != p.shape:
                raise ContractError(f"checkpoint shape mismatch for {name}: "
                                    f"{loaded[name].shape} vs {p.shape}")
            p.data = loaded[name].astype(self.dtype)

    # -- forward ------------------------------------------------------------
    def token_proposals(self, feat: MultiScaleFeatureMap) -> np.ndarray:
        """Grid-anchored box proposals: token center plus a per-level size prior."""
        key = tuple(feat.levels)
        if key not in self._proposal_cache:
            sizes = _PROPOSAL_BASE_SIZE * (2.0 ** feat.level_of)
            self._proposal_cache[key] = np.concatenate(
                [feat.pos_of, np.stack([sizes, sizes], axis=-1)], axis=-1)
        return self._proposal_cache[key]

    def _select(self, feat: MultiScaleFeatureMap, rho: float, selection_seeds):
        cfg = self.cfg
        scoring_logits = None
        os_out = None
        if cfg.criterion == "dam":
            scoring_logits = score_tokens(self.scoring_net, feat)
            sel = select_top_rho(scoring_logits.data, rho, feat.pad_mask)
        elif cfg.criterion == "os":
            os_out = self.os_head(feat.tokens, self.token_proposals(feat))
            scores = expit(os_out[0].data).max(axis=-1)
            sel = select_top_rho(scores, rho, feat.pad_mask)
        else:
            if selection_seeds is None:
                selection_seeds = np.arange(feat.batch) * 7919 + self._forward_count
            sel = random_selection(rho, feat.pad_mask, selection_seeds)
        return sel, scoring_logits, os_out

    def forward(self, images: Tensor, rho: float | None = None, record: bool = True,
                selection_seeds=None, pad_mask: np.ndarray | None = None,
                dense_reference: bool = False, plan: ForwardPlan | None = None) -> ForwardOutputs:
        """Run the detector.

        ``dense_reference`` refines every token directly, bypassing the
        gather/scatter route (the unsparsified reference). ``plan`` replays
        the detached decisions of a previous pass.
        """
        cfg = self.cfg
        rho = cfg.rho if rho is None else rho
        if not 0.0 <= rho <= 1.0:
            raise ContractError(f"inference rho must be in [0, 1], got {rho}")
        self._forward_count += 1
        feat = self.backbone(images, pad_mask)
        sel, scoring_logits, os_out = self._select(feat, rho, selection_seeds)
        if plan is not None:
            sel = plan.selection
        if len(set(sel.counts.tolist())) > 1:
            raise ContractError("ragged selection counts; run padded images one at a time")
        s = int(sel.counts[0])
        sel_idx = np.argsort(~sel.selected, axis=1, kind="stable")[:, :s] if s else \
            np.zeros((feat.batch, 0), dtype=np.int64)

        tokens = feat.tokens
        enc_aux = []
        proposals = self.token_proposals(feat)
        for li, layer in enumerate(self.enc_layers):
            tokens = layer(tokens, None if dense_reference else sel_idx, feat,
                           norm=cfg.norm_placement)
            if cfg.use_encoder_aux and s > 0:
                sel_tokens = T.gather_tokens(tokens, sel_idx)
                cls_l, box_l = self.enc_aux_heads[li](sel_tokens, proposals[sel_idx])
                enc_aux.append((cls_l, box_l, sel_idx))
        enc_feat = MultiScaleFeatureMap(feat.levels, tokens, feat.level_of, feat.pos_of,
                                        feat.pad_mask)

        topk_cls, topk_boxes = self.topk_head(tokens, proposals)
        if plan is not None:
            topk_idx = plan.topk_idx
        else:
            scores = expit(topk_cls.data).max(axis=-1)
            scores[feat.pad_mask] = -np.inf
            k = cfg.topk_queries
            n_valid = feat.valid_counts()
            if np.any(k > n_valid):
                raise ContractError(f"top-k {k} exceeds valid token count {n_valid.min()}")
            topk_idx = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        qf = self.query_norm(self.query_proj(T.gather_tokens(tokens, topk_idx)))
        if plan is None:
            ref_boxes = np.take_along_axis(topk_boxes.data, topk_idx[..., None], axis=1).copy()

        records = []
        dec_outputs = []
        ref_history = []
        for di, dlayer in enumerate(self.dec_layers):
            if plan is not None:
                ref_boxes = plan.ref_boxes[di]
            ref_history.append(ref_boxes)
            qf, rec = dlayer(qf, ref_boxes, enc_feat, record=record)
            if rec is not None:
                records.append(rec)
            cls_d, box_d = self.dec_heads[di](qf, ref_boxes)
            dec_outputs.append((cls_d, box_d))
            if cfg.use_bbox_refine and plan is None:
                ref_boxes = box_d.data.copy()

        return ForwardOutputs(
            final=dec_outputs[-1], dec_outputs=dec_outputs, enc_aux=enc_aux,
            topk_out=(topk_cls, topk_boxes), os_out=os_out,
            scoring_logits=scoring_logits, selection=sel, records=records,
            feat=feat, enc_feat=enc_feat, topk_idx=topk_idx, rho=rho,
            plan=ForwardPlan(selection=sel, topk_idx=topk_idx, ref_boxes=ref_history))

    def detections(self, outputs: ForwardOutputs) -> list[M.DetectionSet]:
        cls_logits, boxes = outputs.final
        probs = expit(cls_logits.data)
        return [M.DetectionSet(scores=probs[i], boxes=np.asarray(boxes.data[i], dtype=np.float64))
                for i in range(probs.shape[0])]


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _head_loss(cls_logits: Tensor, boxes: Tensor, targets, num_boxes: float,
               valid: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """Matched set loss of one head over the batch, normalized by gt count."""
    b, m, c = cls_logits.shape
    dtype = cls_logits.data.dtype
    probs = expit(cls_logits.data)
    focal_targets = np.zeros((b, m, c), dtype=dtype)
    matched_flat: list[int] = []
    matched_gt: list[np.ndarray] = []
    # one pairwise geometry pass for the whole batch, sliced per image below
    gt_all = np.concatenate([gtb for _, gtb in targets]) if targets else np.zeros((0, 4))
    offsets = np.cumsum([0] + [len(lb) for lb, _ in targets])
    if len(gt_all):
        boxes_flat = np.asarray(boxes.data.reshape(b * m, 4), dtype=np.float64)
        giou_all = M.giou_matrix(boxes_flat, gt_all)
        l1_all = np.abs(boxes_flat[:, None, :] - gt_all[None, :, :]).sum(axis=-1)
    w_cls, w_l1, w_giou = M.COST_WEIGHTS
    for i in range(b):
        labels, gtb = targets[i]
        if len(labels) == 0:
            continue
        if m < len(labels):
            continue  # head cannot cover this image's ground truths; skip it
        rows = slice(i * m, (i + 1) * m)
        cols = slice(offsets[i], offsets[i + 1])
        cost = (w_cls * (-probs[i][:, np.asarray(labels, dtype=np.int64)])
                + w_l1 * l1_all[rows, cols] + w_giou * (-giou_all[rows, cols]))
        if valid is not None and valid[i].any():
            cost[valid[i]] += 1e6  # padded predictions must never match
        pairs = M.hungarian(cost)
        for pi, gi in pairs:
            focal_targets[i, pi, int(labels[gi])] = 1.0
            matched_flat.append(i * m + pi)
            matched_gt.append(gtb[gi])
    keep = None if valid is None else ~np.asarray(valid)
    loss_cls = M.sigmoid_focal_loss(cls_logits, focal_targets, valid=keep)
    loss_cls = T.mul_scalar(loss_cls, 1.0 / num_boxes)
    if matched_flat:
        flat_boxes = T.reshape(boxes, (b * m, 4))
        sel = T.gather_tokens(flat_boxes, np.asarray(matched_flat))
        gt_arr = np.stack(matched_gt)
        loss_l1 = T.mul_scalar(M.l1_loss_pairs(sel, gt_arr), 1.0 / num_boxes)
        loss_giou = T.mul_scalar(M.giou_loss_pairs(sel, gt_arr), 1.0 / num_boxes)
    else:
        loss_l1 = T.const(np.zeros((), dtype=dtype))
        loss_giou = T.const(np.zeros((), dtype=dtype))
    total = T.add(T.add(T.mul_scalar(loss_cls, LOSS_WEIGHTS["cls"]),
                        T.mul_scalar(loss_l1, LOSS_WEIGHTS["l1"])),
                  T.mul_scalar(loss_giou, LOSS_WEIGHTS["giou"]))
    parts = {"cls": loss_cls.item(), "l1": loss_l1.item(), "giou": loss_giou.item()}
    return total, parts


def total_loss(outputs: ForwardOutputs, targets, cfg: ModelConfig,
               rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, float]]:
    """Sum of all matched-set head losses plus the scoring objective.

    ``targets`` is a per-image list of (labels, boxes). The breakdown maps
    term names to floats; the saliency term appears only for the dam
    criterion, and encoder-aux terms vanish exactly when disabled.
    """
    num_boxes = max(1, sum(len(lb) for lb, _ in targets))
    pad = outputs.feat.pad_mask
    terms: list[Tensor] = []
    breakdown: dict[str, float] = {}

    final_total, parts = _head_loss(*outputs.final, targets, num_boxes, valid=_pad_for(pad, outputs.final[0]))
    terms.append(final_total)
    breakdown["final_cls"] = parts["cls"]
    breakdown["final_l1"] = parts["l1"]
    breakdown["final_giou"] = parts["giou"]

    dec_aux_total = 0.0
    for cls_l, box_l in outputs.dec_outputs[:-1]:
        t, p = _head_loss(cls_l, box_l, targets, num_boxes, valid=None)
        terms.append(t)
        dec_aux_total += p["cls"] + p["l1"] + p["giou"]
    breakdown["dec_aux"] = dec_aux_total

    enc_aux_total = 0.0
    for cls_l, box_l, _idx in outputs.enc_aux:
        t, p = _head_loss(cls_l, box_l, targets, num_boxes, valid=None)
        terms.append(t)
        enc_aux_total += p["cls"] + p["l1"] + p["giou"]
    breakdown["enc_aux"] = enc_aux_total

    t, p = _head_loss(*outputs.topk_out, targets, num_boxes, valid=_pad_for(pad, outputs.topk_out[0]))
    terms.append(t)
    breakdown["topk"] = p["cls"] + p["l1"] + p["giou"]

    if outputs.os_out is not None:
        t, p = _head_loss(*outputs.os_out, targets, num_boxes, valid=_pad_for(pad, outputs.os_out[0]))
        terms.append(t)
        breakdown["os"] = p["cls"] + p["l1"] + p["giou"]

    if cfg.criterion == "dam" and outputs.scoring_logits is not None:
        dam = build_dam(outputs.records, outputs.enc_feat)
        outputs.dam = dam
        if cfg.dam_loss_kind == "bce":
            target = binarize_dam(dam, outputs.rho, pad)
        else:
            target = dam
        ldam = saliency_loss(outputs.scoring_logits, target, cfg.dam_loss_kind, pad, rng=rng)
        terms.append(T.mul_scalar(ldam, cfg.dam_loss_weight))
        breakdown["dam"] = ldam.item()

    acc = terms[0]
    for extra in terms[1:]:
        acc = T.add(acc, extra)
    breakdown["total"] = acc.item()
    return acc, breakdown


def _pad_for(pad: np.ndarray, logits: Tensor) -> np.ndarray | None:
    """Pass the pad mask through only when it applies to this head's rows."""
    if pad is None or not pad.any():
        return None
    return pad if pad.shape[1] == logits.shape[1] else None
