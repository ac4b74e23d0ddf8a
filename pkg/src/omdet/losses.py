"""Training objectives for the detector.

All losses are built on autodiff nodes so they gradient-check against the
central-difference oracle. Classification targets arrive as plain numpy
arrays (they are constants in the graph).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ContractError, NumericError

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossValue:
    """Scalar loss node plus the positive-sample count it was divided by."""

    value: Node
    normalizer: float
    empty: bool = False  # set when there was nothing to constrain


def _bce_with_logits(logits: Node, targets: Array) -> Node:
    # t*softplus(-x) + (1-t)*softplus(x), stable on both tails
    t = ad.constant(targets)
    one_minus_t = ad.constant(1.0 - targets)
    return ad.add(
        ad.mul(t, ad.softplus(ad.neg(logits))),
        ad.mul(one_minus_t, ad.softplus(logits)),
    )


def sigmoid_focal_loss(logits: Node, targets: Array, alpha: float = FOCAL_ALPHA,
                       gamma: float = FOCAL_GAMMA) -> LossValue:
    """Per-element sigmoid focal loss, summed and divided by the positive count.

    ``targets`` is one-hot-or-zero [M, C]; an all-zero row is a pure
    background sample (every class a negative). The normalizer is the number
    of rows containing a positive, clamped to at least 1.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if logits.value.shape != targets.shape:
        raise ContractError(
            f"sigmoid_focal_loss: logits {logits.value.shape} vs targets {targets.shape}"
        )
    if not (0.0 < alpha < 1.0) or gamma < 0.0:
        raise ContractError("sigmoid_focal_loss: need alpha in (0,1) and gamma >= 0")
    if not np.isfinite(logits.value).all():
        raise NumericError("sigmoid_focal_loss: non-finite logits")

    ce = _bce_with_logits(logits, targets)
    p = ad.sigmoid(logits)
    t = ad.constant(targets)
    # p_t = p for positives, 1-p for negatives
    p_t = ad.add(ad.mul(p, t), ad.mul(1.0 - p, ad.constant(1.0 - targets)))
    alpha_t = ad.constant(alpha * targets + (1.0 - alpha) * (1.0 - targets))
    per_elem = ad.mul(alpha_t, ad.mul(ad.pow_const(1.0 - p_t, gamma), ce))

    normalizer = max(1.0, float(np.sum(targets.sum(axis=1) > 0)))
    return LossValue(ad.div(ad.sum_all(per_elem), ad.constant(normalizer)), normalizer)


def softmax_cross_entropy(logits: Node, labels) -> LossValue:
    """Mean negative log-likelihood over rows; label index C is background."""
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.value.shape
    if labels.shape != (m,):
        raise ContractError(f"softmax_cross_entropy: labels shape {labels.shape} != ({m},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ContractError("softmax_cross_entropy: label out of range")
    if not np.isfinite(logits.value).all():
        raise NumericError("softmax_cross_entropy: non-finite logits")

    # Detached row max keeps logsumexp stable; its gradient contribution
    # cancels exactly, so treating it as a constant is exact.
    row_max = logits.value.max(axis=1, keepdims=True)
    shifted = ad.sub(logits, ad.constant(np.broadcast_to(row_max, (m, c)).copy()))
    sums = ad.matmul(ad.exp(shifted), ad.constant(np.ones((c, 1))))  # [M,1]
    lse = ad.add(ad.log(sums), ad.constant(row_max))
    onehot = np.zeros((m, c))
    onehot[np.arange(m), labels] = 1.0
    picked = ad.sum_all(ad.mul(logits, ad.constant(onehot)))
    nll = ad.div(ad.sub(ad.sum_all(lse), picked), ad.constant(float(m)))
    return LossValue(nll, float(m))


def opl_loss(features: Node, labels) -> LossValue:
    """Orthogonal-projection soft constraint on normalized foreground features.

    loss = (1 - s) + |d| where s is the mean pairwise cosine among same-class
    samples and d the mean pairwise cosine among different-class samples.
    Callers pass foreground samples only. With fewer than two samples (or no
    pair of a kind) the missing term drops out; no pairs at all yields a
    zero loss flagged ``empty``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m = labels.shape[0]
    if features.value.ndim != 2 or features.value.shape[0] != m:
        raise ContractError(
            f"opl_loss: features {features.value.shape} vs {m} labels"
        )
    if m < 2:
        return LossValue(ad.constant(0.0), 1.0, empty=True)

    same = (labels[:, None] == labels[None, :]) & ~np.eye(m, dtype=bool)
    diff = labels[:, None] != labels[None, :]
    n_same = float(same.sum())
    n_diff = float(diff.sum())

    normalized = ad.l2_normalize(features)
    gram = ad.matmul(normalized, ad.transpose(normalized, (1, 0)))

    terms = []
    if n_same > 0:
        s = ad.div(ad.sum_all(ad.mul(gram, ad.constant(same.astype(float)))),
                   ad.constant(n_same))
        terms.append(1.0 - s)
    if n_diff > 0:
        d = ad.div(ad.sum_all(ad.mul(gram, ad.constant(diff.astype(float)))),
                   ad.constant(n_diff))
        terms.append(ad.absval(d))
    if not terms:
        return LossValue(ad.constant(0.0), 1.0, empty=True)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    # clamp last-ulp negatives from cosine rounding
    return LossValue(ad.maximum(total, 0.0), float(m))


def giou_loss(pred_boxes: Node, gt_boxes: Array) -> LossValue:
    """Mean (1 - GIoU) between predicted and ground-truth (x1,y1,x2,y2) boxes."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if pred_boxes.value.ndim != 2 or pred_boxes.value.shape[1] != 4 or gt.shape != pred_boxes.value.shape:
        raise ContractError(
            f"giou_loss: shapes {pred_boxes.value.shape} vs {gt.shape}"
        )
    if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
        raise ContractError("giou_loss: degenerate ground-truth box")
    m = gt.shape[0]

    px1, py1 = ad.column(pred_boxes, 0), ad.column(pred_boxes, 1)
    px2, py2 = ad.column(pred_boxes, 2), ad.column(pred_boxes, 3)
    gx1, gy1, gx2, gy2 = (ad.constant(gt[:, j]) for j in range(4))

    iw = ad.relu(ad.sub(ad.minimum(px2, gx2), ad.maximum(px1, gx1)))
    ih = ad.relu(ad.sub(ad.minimum(py2, gy2), ad.maximum(py1, gy1)))
    inter = ad.mul(iw, ih)
    area_p = ad.mul(ad.sub(px2, px1), ad.sub(py2, py1))
    area_g = ad.constant((gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1]))
    union = ad.sub(ad.add(area_p, area_g), inter)
    iou = ad.div(inter, union)

    ew = ad.sub(ad.maximum(px2, gx2), ad.minimum(px1, gx1))
    eh = ad.sub(ad.maximum(py2, gy2), ad.minimum(py1, gy1))
    enclose = ad.mul(ew, eh)
    giou = ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))

    return LossValue(ad.mean_all(1.0 - giou), float(m))


def centerness_loss(pred: Node, targets: Array) -> LossValue:
    """Binary cross-entropy between sigmoid(pred) and centerness targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if pred.value.shape != targets.shape or targets.ndim != 1:
        raise ContractError(
            f"centerness_loss: shapes {pred.value.shape} vs {targets.shape}"
        )
    if targets.size and (targets.min() < 0.0 or targets.max() > 1.0):
        raise ContractError("centerness_loss: targets must lie in [0, 1]")
    m = max(1, targets.shape[0])
    return LossValue(ad.div(ad.sum_all(_bce_with_logits(pred, targets)),
                            ad.constant(float(m))), float(m))
