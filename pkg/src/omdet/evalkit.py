"""Detection evaluation: AP/mAP, confusion matrices, feature orthogonality.

Two matching views are computed from the same detections:
  * class-restricted greedy matching feeds precision/recall and AP (one
    curve per class);
  * class-agnostic greedy matching feeds the confusion matrix, where a
    wrong-class overlap counts as a confusion event rather than a miss plus
    a false positive.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou
from .errors import ContractError

IOU_THRESH = 0.5


@dataclass
class MatchRecord:
    """One detection after class-agnostic matching, in rank order."""

    scene_id: int
    pred_class: int
    score: float
    gt_class: int | None  # None: no ground truth overlapped (background FP)
    iou: float


@dataclass
class MatchResult:
    records: list
    missed: list  # (scene_id, gt_class) for every unmatched ground truth
    gt_counts: np.ndarray  # per-class ground-truth totals


@dataclass
class EvalReport:
    per_class_ap: dict
    mean_ap: float
    confusion: np.ndarray        # [C+1, C+1] counts
    confusion_pct: np.ndarray    # row-normalized percentages
    ortho: dict
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "mAP": self.mean_ap,
            "confusion_counts": self.confusion.tolist(),
            "confusion_pct": self.confusion_pct.tolist(),
            "orthogonality": self.ortho,
            "metadata": self.metadata,
        }


def _rank_key(entry):
    det = entry[1]
    return (-det.score, entry[0], det.class_id, det.box)


def match_detections(detections_per_scene, annotations_per_scene,
                     iou_thresh: float = IOU_THRESH, num_classes: int | None = None) -> MatchResult:
    """Greedy class-agnostic matching in descending score order.

    Each ground truth is matched at most once, to the first (highest-ranked)
    detection whose IoU clears the threshold; the detection keeps the gt's
    class for the confusion tally even when classes disagree.
    """
    if len(detections_per_scene) != len(annotations_per_scene):
        raise ContractError("match_detections: scene list lengths differ")
    ranked = sorted(
        ((sid, det) for sid, dets in enumerate(detections_per_scene) for det in dets),
        key=_rank_key,
    )
    taken = [np.zeros(len(anns), dtype=bool) for anns in annotations_per_scene]
    records = []
    for sid, det in ranked:
        anns = annotations_per_scene[sid]
        best_iou, best_j = 0.0, -1
        for j, ann in enumerate(anns):
            if taken[sid][j]:
                continue
            v = iou(det.box, ann.box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[sid][best_j] = True
            records.append(MatchRecord(sid, det.class_id, det.score,
                                       anns[best_j].class_id, best_iou))
        else:
            records.append(MatchRecord(sid, det.class_id, det.score, None, best_iou))

    missed = []
    max_class = 0
    for sid, anns in enumerate(annotations_per_scene):
        for j, ann in enumerate(anns):
            max_class = max(max_class, ann.class_id)
            if not taken[sid][j]:
                missed.append((sid, ann.class_id))
    if num_classes is None:
        num_classes = max_class + 1
    gt_counts = np.zeros(num_classes, dtype=np.int64)
    for anns in annotations_per_scene:
        for ann in anns:
            gt_counts[ann.class_id] += 1
    return MatchResult(records=records, missed=missed, gt_counts=gt_counts)


def per_class_pr_inputs(detections_per_scene, annotations_per_scene, class_id: int,
                        iou_thresh: float = IOU_THRESH):
    """(score, is_tp) pairs in rank order plus gt count, class-restricted."""
    ranked = sorted(
        ((sid, det) for sid, dets in enumerate(detections_per_scene)
         for det in dets if det.class_id == class_id),
        key=_rank_key,
    )
    gt_boxes = [[a.box for a in anns if a.class_id == class_id]
                for anns in annotations_per_scene]
    taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    out = []
    for sid, det in ranked:
        best_iou, best_j = 0.0, -1
        for j, box in enumerate(gt_boxes[sid]):
            if taken[sid][j]:
                continue
            v = iou(det.box, box)
            if v > best_iou:
                best_iou, best_j = v, j
        tp = best_j >= 0 and best_iou >= iou_thresh
        if tp:
            taken[sid][best_j] = True
        out.append((det.score, bool(tp)))
    num_gt = sum(len(b) for b in gt_boxes)
    return out, num_gt


def ap_from_ranked(scored_flags, num_gt: int) -> float:
    """All-points interpolated average precision from rank-ordered TP flags."""
    if num_gt < 1:
        raise ContractError("ap_from_ranked: need at least one ground truth")
    if not scored_flags:
        return 0.0
    tps = np.array([1.0 if tp else 0.0 for _, tp in scored_flags])
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(1.0 - tps)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope, then sum over recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def average_precision(per_class_inputs: dict):
    """Per-class AP and the unweighted mean over classes with ground truth.

    ``per_class_inputs`` maps class_id -> (ranked (score, tp) list, num_gt).
    Classes without ground truth are excluded with a warning.
    """
    per_class = {}
    for cid, (ranked, num_gt) in sorted(per_class_inputs.items()):
        if num_gt < 1:
            warnings.warn(f"class {cid} has no ground truth; excluded from mAP")
            continue
        per_class[cid] = ap_from_ranked(ranked, num_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


def confusion_matrix(result: MatchResult, num_classes: int):
    """[C+1, C+1] counts: entry (i, j) is gt class i predicted as j; the last
    column collects missed ground truths, the last row background false
    positives. Returns (counts, row-normalized percentages)."""
    c = num_classes
    counts = np.zeros((c + 1, c + 1), dtype=np.int64)
    for rec in result.records:
        if rec.gt_class is not None:
            counts[rec.gt_class, rec.pred_class] += 1
        else:
            counts[c, rec.pred_class] += 1
    for _, gt_class in result.missed:
        counts[gt_class, c] += 1
    sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        pct = np.where(sums > 0, 100.0 * counts / sums, 0.0)
    return counts, pct


def within_family_confusion(counts: np.ndarray, num_families: int) -> float:
    """Fraction of matched detections whose predicted subclass is wrong but in
    the ground truth's family. Returns 0 when nothing matched."""
    c = counts.shape[0] - 1
    if c % num_families:
        raise ContractError("within_family_confusion: classes do not split into families")
    per_family = c // num_families
    matched = counts[:c, :c].sum()
    if matched == 0:
        return 0.0
    wrong = 0
    for i in range(c):
        for j in range(c):
            if i != j and i // per_family == j // per_family:
                wrong += counts[i, j]
    return float(wrong) / float(matched)


def orthogonality_metrics(features: np.ndarray, labels) -> dict:
    """Angle statistics of per-class means of L2-normalized feature vectors.

    Returns mean intra-class cosine (classes with >= 2 samples), mean
    pairwise |cosine| between different-class mean vectors, and the full
    class-pair cosine matrix. Invariant to positive per-sample rescaling.
    """
    labels = np.asarray(labels, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ContractError("orthogonality_metrics: features/labels mismatch")
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    normalized = features / np.maximum(norms, 1e-12)

    classes = sorted(set(labels.tolist()))
    means = {}
    intra = []
    for cid in classes:
        rows = normalized[labels == cid]
        means[cid] = rows.mean(axis=0)
        if rows.shape[0] >= 2:
            gram = rows @ rows.T
            off = gram[~np.eye(rows.shape[0], dtype=bool)]
            intra.append(float(off.mean()))

    pair = np.full((len(classes), len(classes)), np.nan)
    inter = []
    for a, ca in enumerate(classes):
        for b, cb in enumerate(classes):
            va, vb = means[ca], means[cb]
            denom = np.linalg.norm(va) * np.linalg.norm(vb)
            cosab = float(va @ vb / denom) if denom > 0 else 0.0
            pair[a, b] = cosab
            if a < b:
                inter.append(abs(cosab))

    return {
        "classes": classes,
        "mean_intra_cosine": float(np.mean(intra)) if intra else None,
        "mean_inter_abs_cosine": float(np.mean(inter)) if inter else None,
        "pair_cosine": pair.tolist(),
    }


def evaluate(detections_per_scene, annotations_per_scene, num_classes: int,
             iou_thresh: float = IOU_THRESH, ortho: dict | None = None,
             metadata: dict | None = None) -> EvalReport:
    """Full evaluation: per-class AP, mAP, confusion matrix, optional extras."""
    inputs = {
        cid: per_class_pr_inputs(detections_per_scene, annotations_per_scene, cid, iou_thresh)
        for cid in range(num_classes)
    }
    per_class_ap, mean_ap = average_precision(inputs)
    matches = match_detections(detections_per_scene, annotations_per_scene,
                               iou_thresh, num_classes)
    counts, pct = confusion_matrix(matches, num_classes)
    return EvalReport(
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        confusion=counts,
        confusion_pct=pct,
        ortho=ortho or {},
        metadata=metadata or {},
    )


def write_confusion_csv(counts: np.ndarray, path) -> None:
    c = counts.shape[0] - 1
    names = [f"class_{i}" for i in range(c)] + ["background"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gt\\pred"] + names + ["missed"])
        for i in range(c + 1):
            w.writerow([names[i]] + [int(v) for v in counts[i]])


def collect_positive_features(model, scenes):
    """Per positive grid location: (scene_id, gt class, argmax-correct flag,
    cls-head input feature vector). Feeds orthogonality stats and the CSV
    export; independent of NMS."""
    from .detector import assign_targets  # local import avoids a cycle

    cfg = model.config
    grid = (cfg.grid_size, cfg.grid_size, cfg.stride)
    rows = []
    for sid, scene in enumerate(scenes):
        from .detector import forward

        cls, _, _, feats = forward(model, scene.image, return_features=True)
        targets = assign_targets(scene.annotations, grid, cfg.num_classes,
                                 cfg.center_radius)
        pos = np.nonzero(targets.pos_mask)
        for i, j in zip(*pos):
            label = int(targets.labels[i, j])
            pred = int(np.argmax(cls[i, j, :cfg.num_classes]))
            rows.append((sid, label, pred == label, feats[i, j].copy()))
    return rows


def export_features(model, scenes, path) -> int:
    """CSV of positive-location features; returns the row count."""
    rows = collect_positive_features(model, scenes)
    n = model.config.feature_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "class_id", "matched"] + [f"f_{i}" for i in range(n)])
        for sid, label, matched, feat in rows:
            w.writerow([sid, label, int(matched)] + [repr(float(v)) for v in feat])
    return len(rows)
