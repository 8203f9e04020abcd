"""Bipartite set matching and the detection losses built on it.

Predictions pair with ground truths through a minimum-cost assignment over
classification and regression costs; the matched loss combines a sigmoid
focal term over all predictions with L1 and generalized-IoU terms over the
matched pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

COST_WEIGHTS = (2.0, 5.0, 2.0)  # class, l1, giou
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class DetectionSet:
    """M predictions: per-class scores in [0,1] and normalized cxcywh boxes."""

    scores: np.ndarray  # [M, C]
    boxes: np.ndarray   # [M, 4]

    def __len__(self) -> int:
        return self.scores.shape[0]


# ---------------------------------------------------------------------------
# box geometry (numpy; used for costs and evaluation)
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def _check_positive_area(b: np.ndarray, who: str) -> None:
    if np.any(b[..., 2] <= 0) or np.any(b[..., 3] <= 0):
        raise ContractError(f"{who}: zero-area box (w and h must be positive)")


def giou(a, b) -> float:
    """Generalized IoU of two cxcywh boxes, in [-1, 1]; giou(a, a) == 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_positive_area(a[None], "giou")
    _check_positive_area(b[None], "giou")
    return float(giou_matrix(a[None], b[None])[0, 0])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between cxcywh boxes a[M, 4] and b[G, 4]."""
    _check_positive_area(a, "giou_matrix")
    _check_positive_area(b, "giou_matrix")
    ax = cxcywh_to_xyxy(a)[:, None]
    bx = cxcywh_to_xyxy(b)[None, :]
    lt = np.maximum(ax[..., :2], bx[..., :2])
    rb = np.minimum(ax[..., 2:], bx[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    union = area_a + area_b - inter
    hull_lt = np.minimum(ax[..., :2], bx[..., :2])
    hull_rb = np.maximum(ax[..., 2:], bx[..., 2:])
    hull = (hull_rb[..., 0] - hull_lt[..., 0]) * (hull_rb[..., 1] - hull_lt[..., 1])
    return inter / union - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray, clip_unit: bool = False) -> np.ndarray:
    """Pairwise IoU between cxcywh boxes; optionally clamp to the unit square."""
    ax = cxcywh_to_xyxy(a)
    bx = cxcywh_to_xyxy(b)
    if clip_unit:
        ax = np.clip(ax, 0.0, 1.0)
        bx = np.clip(bx, 0.0, 1.0)
    ax = ax[:, None]
    bx = bx[None, :]
    lt = np.maximum(ax[..., :2], bx[..., :2])
    rb = np.minimum(ax[..., 2:], bx[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip((ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1]), 1e-12, None)
    area_b = np.clip((bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1]), 1e-12, None)
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def build_cost_matrix(preds: DetectionSet, gt_labels: np.ndarray, gt_boxes: np.ndarray,
                      weights: tuple[float, float, float] = COST_WEIGHTS) -> np.ndarray:
    """cost[i, j] = w_cls*(-p_i(c_j)) + w_l1*|b_i-b_j|_1 + w_giou*(-giou(b_i, b_j))."""
    if len(preds) < 1:
        raise ContractError("cost matrix needs at least one prediction")
    w_cls, w_l1, w_giou = weights
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    cls_cost = -preds.scores[:, gt_labels]
    l1_cost = np.abs(preds.boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    giou_cost = -giou_matrix(preds.boxes, gt_boxes)
    return w_cls * cls_cost + w_l1 * l1_cost + w_giou * giou_cost


@numba.njit(cache=True)
def _augmenting_paths(a: np.ndarray) -> np.ndarray:
    """Assign every row of a[m, n] (m <= n) to a distinct column; returns
    p[n+1] with p[col] = 1-based row index. Shortest augmenting paths with
    potentials; ties resolve toward earlier columns."""
    m, n = a.shape
    inf = np.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of every column (ground truth) to a distinct row.

    cost is [n, m] with n >= m; returns (row, col) pairs sorted by column,
    deterministic under ties (earlier indices win).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n, m = cost.shape
    if m > n:
        raise ContractError(f"more ground truths ({m}) than predictions ({n})")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix must be finite")
    if m == 0:
        return []
    p = _augmenting_paths(np.ascontiguousarray(cost.T))
    pairs = [(col - 1, int(p[col]) - 1) for col in range(1, n + 1) if p[col] != 0]
    return sorted(pairs, key=lambda rc: rc[1])


def match(preds: DetectionSet, gt_labels: np.ndarray, gt_boxes: np.ndarray,
          weights: tuple[float, float, float] = COST_WEIGHTS) -> list[tuple[int, int]]:
    if len(gt_labels) == 0:
        return []
    return hungarian(build_cost_matrix(preds, gt_labels, gt_boxes, weights))


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------

def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) = relu(x) + log1p(e^-|x|), stable at both tails
    return T.add(T.relu(x), T.log(T.add_scalar(T.exp(T.neg(T.abs_(x))), 1.0)))


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray,
                       alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
                       valid: np.ndarray | None = None) -> Tensor:
    """Summed sigmoid focal loss; targets are 0/1 constants of logits' shape.

    gamma is fixed at 2 (the focusing power is implemented as a square).
    """
    assert gamma == 2.0, "focusing power is hard-wired to 2"
    z = np.asarray(targets, dtype=logits.data.dtype)
    p = T.sigmoid(logits)
    one_m_p = T.add_scalar(T.neg(p), 1.0)
    pos = T.mul(T.mul(one_m_p, one_m_p), softplus(T.neg(logits)))   # (1-p)^2 * -log p
    neg = T.mul(T.mul(p, p), softplus(logits))                       # p^2 * -log(1-p)
    wpos = alpha * z
    wneg = (1.0 - alpha) * (1.0 - z)
    if valid is not None:
        keep = np.broadcast_to(np.asarray(valid, dtype=bool)[..., None], z.shape)
        wpos = wpos * keep
        wneg = wneg * keep
    total = T.add(T.mul(pos, T.const(wpos.astype(logits.data.dtype))),
                  T.mul(neg, T.const(wneg.astype(logits.data.dtype))))
    return T.sum_all(total)


def l1_loss_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Summed L1 distance between matched cxcywh boxes [P, 4]."""
    diff = T.sub(pred_boxes, T.const(np.asarray(gt_boxes, dtype=pred_boxes.data.dtype)))
    return T.sum_all(T.abs_(diff))


def giou_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Differentiable GIoU for matched pairs [P, 4] cxcywh; returns [P]."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    _check_positive_area(gt, "giou_pairs")
    if np.any(pred_boxes.data[..., 2:] <= 0):
        raise ContractError("giou_pairs: zero-area predicted box")
    gtx = cxcywh_to_xyxy(gt).astype(pred_boxes.data.dtype)

    cxy = T.slice_axis(pred_boxes, -1, 0, 2)
    half = T.mul_scalar(T.slice_axis(pred_boxes, -1, 2, 4), 0.5)
    p_lt = T.sub(cxy, half)
    p_rb = T.add(cxy, half)

    g_lt = T.const(gtx[:, 0:2])
    g_rb = T.const(gtx[:, 2:4])

    lt = T.maximum(p_lt, g_lt)
    rb = T.minimum(p_rb, g_rb)
    wh = T.relu(T.sub(rb, lt))
    inter = T.mul(T.slice_axis(wh, -1, 0, 1), T.slice_axis(wh, -1, 1, 2))

    p_wh = T.sub(p_rb, p_lt)
    area_p = T.mul(T.slice_axis(p_wh, -1, 0, 1), T.slice_axis(p_wh, -1, 1, 2))
    area_g = ((gtx[:, 2] - gtx[:, 0]) * (gtx[:, 3] - gtx[:, 1]))[:, None]
    union = T.sub(T.add(area_p, T.const(area_g.astype(pred_boxes.data.dtype))), inter)

    h_lt = T.minimum(p_lt, g_lt)
    h_rb = T.maximum(p_rb, g_rb)
    h_wh = T.sub(h_rb, h_lt)
    hull = T.mul(T.slice_axis(h_wh, -1, 0, 1), T.slice_axis(h_wh, -1, 1, 2))

    iou = T.div(inter, union)
    frac = T.div(T.sub(hull, union), hull)
    return T.reshape(T.sub(iou, frac), (len(gt),))


def giou_loss_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Summed (1 - GIoU) over matched pairs."""
    g = giou_pairs(pred_boxes, gt_boxes)
    return T.sum_all(T.add_scalar(T.neg(g), 1.0))


def hungarian_loss(class_logits: Tensor, pred_boxes: Tensor,
                   gt_labels: np.ndarray, gt_boxes: np.ndarray,
                   assignment: list[tuple[int, int]],
                   valid: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Per-image set loss given an assignment.

    Returns unnormalized (classification, box-L1, box-GIoU) sums; matched
    predictions carry their ground-truth class as the positive target, all
    other logits are negatives, and the box terms run over matched pairs
    only. The caller divides by the ground-truth count.
    """
    m, c = class_logits.shape
    targets = np.zeros((m, c), dtype=class_logits.data.dtype)
    for pi, gi in assignment:
        targets[pi, int(gt_labels[gi])] = 1.0
    loss_cls = sigmoid_focal_loss(class_logits, targets, valid=valid)
    if len(assignment) == 0:
        zero = T.const(np.zeros((), dtype=class_logits.data.dtype))
        return loss_cls, zero, zero
    pred_idx = np.array([pi for pi, _ in assignment])
    gt_idx = np.array([gi for _, gi in assignment])
    matched = T.gather_tokens(pred_boxes, pred_idx)
    gt = np.asarray(gt_boxes)[gt_idx]
    return loss_cls, l1_loss_pairs(matched, gt), giou_loss_pairs(matched, gt)
