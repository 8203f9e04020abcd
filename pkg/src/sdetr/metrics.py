"""Evaluation and measurement: AP, selection/attention overlap, pair counts.

The attention complexity report is closed-form and must equal the runtime
pair counters exactly; the overlap metric (corr) measures how much of the
decoder-referenced attention mass falls inside the encoder-refined token set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import DetectionSet, iou_matrix
from .model import ModelConfig, SparseDetector
from .saliency import SelectionMask, required_count
from .tensor import ContractError

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def _ap_from_flags(flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true/false positive flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # max precision at recall >= r, evaluated on a 101-point recall grid
    order = np.concatenate([precision[::-1], [0.0]])
    running = np.maximum.accumulate(order)[::-1]  # running[i] = max prec from i on
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(recall), running[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def average_precision(preds: list[DetectionSet], gts: list, iou_thresholds=None) -> dict:
    """COCO-style evaluation: greedy score-ordered matching per class/threshold.

    ``gts`` is a per-image list of (labels, boxes). Returns per-threshold APs
    keyed ``ap50``/``ap75`` style plus their mean under ``map``.
    """
    thresholds = tuple(iou_thresholds) if iou_thresholds is not None else DEFAULT_IOU_THRESHOLDS
    for det in preds:
        if det.scores.size and (det.scores.min() < 0 or det.scores.max() > 1):
            raise ContractError("detection scores must lie in [0, 1]")
    classes = sorted({int(c) for labels, _ in gts for c in labels})
    n_images = len(preds)
    ious = []
    for det, (labels, boxes) in zip(preds, gts):
        ious.append(iou_matrix(det.boxes, boxes, clip_unit=True)
                    if len(det) and len(labels) else np.zeros((len(det), len(labels))))

    result: dict[str, float] = {}
    per_threshold: dict[float, float] = {}
    for t in thresholds:
        aps = []
        for c in classes:
            cand = []  # (-score, image, pred index)
            for i in range(n_images):
                det = preds[i]
                for pi in range(len(det)):
                    cand.append((-det.scores[pi, c], i, pi))
            cand.sort()
            n_gt = sum(int((np.asarray(labels) == c).sum()) for labels, _ in gts)
            taken = [np.zeros(len(labels), dtype=bool) for labels, _ in gts]
            flags = np.zeros(len(cand), dtype=bool)
            for row, (_negscore, i, pi) in enumerate(cand):
                labels = np.asarray(gts[i][0])
                best, best_iou = -1, t
                for gi in np.flatnonzero(labels == c):
                    if taken[i][gi]:
                        continue
                    iou = ious[i][pi, gi]
                    if iou >= best_iou:
                        best, best_iou = gi, iou
                if best >= 0:
                    taken[i][best] = True
                    flags[row] = True
            aps.append(_ap_from_flags(flags, n_gt))
        per_threshold[float(t)] = float(np.mean(aps)) if aps else 0.0
    for t, v in per_threshold.items():
        result[f"ap{int(round(t * 100))}"] = v
    result["map"] = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return result


# ---------------------------------------------------------------------------
# selection / attention overlap
# ---------------------------------------------------------------------------

@dataclass
class CorrReport:
    corr: float
    referenced: int   # |tokens with nonzero decoder mass| (or the given set)
    selected: int


def corr_metric(dam: np.ndarray, mask: SelectionMask,
                reference_set: np.ndarray | None = None) -> CorrReport:
    """Fraction of decoder-referenced attention mass inside the selected set.

    The reference token set defaults to the nonzero entries of ``dam``; a
    precomputed set (e.g. from nearest-cell attribution) may be passed
    instead, while the mass itself always comes from ``dam``. An empty
    reference set yields corr = 1.
    """
    dam = np.asarray(dam)
    sel = mask.selected
    if dam.shape != sel.shape:
        raise ContractError(f"dam {dam.shape} and mask {sel.shape} cover different tokens")
    omega = (dam > 0) if reference_set is None else np.asarray(reference_set, dtype=bool)
    denom = float(dam[omega].sum())
    num = float(dam[omega & sel].sum())
    corr = 1.0 if denom == 0.0 else num / denom
    return CorrReport(corr=corr, referenced=int(omega.sum()), selected=int(sel.sum()))


def dam_nonzero_ratio(dam: np.ndarray, pad_mask: np.ndarray | None = None) -> float:
    """Fraction of valid tokens that received any decoder attention mass."""
    dam = np.asarray(dam)
    valid = np.ones(dam.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0
    return float(((dam > 0) & valid).sum() / n_valid)


# ---------------------------------------------------------------------------
# attention complexity accounting
# ---------------------------------------------------------------------------

@dataclass
class FlopReport:
    n_tokens: int
    n_valid: int
    s_tokens: int
    dense_pairs_per_layer: int
    deform_pairs_per_layer: int
    sparse_pairs_per_layer: int
    encoder_pairs: int
    decoder_self_pairs: int
    decoder_cross_pairs: int

    @property
    def total_pairs(self) -> int:
        return self.encoder_pairs + self.decoder_self_pairs + self.decoder_cross_pairs


def tokens_for_image(image_size: int) -> int:
    return (image_size // 8) ** 2 + (image_size // 16) ** 2


def attention_flop_count(cfg: ModelConfig, rho: float, n_tokens: int | None = None,
                         n_valid: int | None = None, image_size: int = 64) -> FlopReport:
    """Closed-form attended-pair counts for one image at keeping ratio rho."""
    n = tokens_for_image(image_size) if n_tokens is None else int(n_tokens)
    nv = n if n_valid is None else int(n_valid)
    s = required_count(rho, nv)
    slot = cfg.points * cfg.heads * cfg.levels
    m = cfg.num_queries
    return FlopReport(
        n_tokens=n,
        n_valid=nv,
        s_tokens=s,
        dense_pairs_per_layer=n * n,
        deform_pairs_per_layer=n * slot,
        sparse_pairs_per_layer=s * slot,
        encoder_pairs=cfg.encoder_layers * s * slot,
        decoder_self_pairs=cfg.decoder_layers * m * m,
        decoder_cross_pairs=cfg.decoder_layers * m * slot,
    )


# ---------------------------------------------------------------------------
# layerwise gradient norms
# ---------------------------------------------------------------------------

def layerwise_grad_norm(model: SparseDetector) -> dict[str, float]:
    """L2 norm of the concatenated parameter gradients per layer group.

    Requires a completed backward pass (populated grads).
    """
    if all(p.grad is None for p in model.parameters()):
        raise ContractError("layerwise_grad_norm called before backward")
    norms: dict[str, float] = {}
    for label, params in model.layer_groups():
        sq = 0.0
        for _name, p in params:
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norms[label] = float(np.sqrt(sq))
    return norms
