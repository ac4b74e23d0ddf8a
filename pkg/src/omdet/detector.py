"""Single-level FCOS-style dense detector with a pluggable classification head.

The trunk is shared by all head kinds; only the last classification layer
changes. ``om`` heads score cosine similarity against a frozen orthonormal
basis, ``linear`` heads use a learnable affine layer (the layer the cosine
head replaces). ``*_softmax`` variants emit C+1 scores (extra background
class / prototype) and train with cross-entropy instead of focal loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Node
from .boxes import clip_box, iou
from .configio import from_dict, to_dict
from .errors import ContractError, NumericError
from .ortho import OrthoBasis, basis_from_json_dict, build_orthogonal_basis, linear_score, om_score

MODEL_FORMAT_VERSION = 1
HEAD_KINDS = ("om", "linear", "om_softmax", "linear_softmax")
BACKBONE_BLOCKS = 3  # stride-2 blocks; effective stride 2**3


@dataclass
class DetectorConfig:
    num_classes: int = 9
    image_size: int = 64
    backbone_widths: tuple = (16, 32, 64, 64)
    stride: int = 8
    feature_dim: int = 64          # N, channel width entering the cls head
    head: str = "om"               # om | linear | om_softmax | linear_softmax
    aux_loss: str = "none"         # none | opl
    opl_weight: float = 0.5
    logit_scale: float = 1.0       # multiplies cosine scores before the loss
    basis_kernel_size: int = 3
    center_radius: float = 1.5     # in strides
    lr: float | None = None        # None -> 0.005 * batch_size / 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 24
    decay_epochs: tuple = (16, 22)
    lr_decay: float = 0.1
    warmup_iters: int = 100        # linear ramp from warmup_ratio * lr
    warmup_ratio: float = 1.0 / 3.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ContractError(f"DetectorConfig: head must be one of {HEAD_KINDS}")
        if self.aux_loss not in ("none", "opl"):
            raise ContractError("DetectorConfig: aux_loss must be 'none' or 'opl'")
        if len(self.backbone_widths) != BACKBONE_BLOCKS + 1:
            raise ContractError("DetectorConfig: backbone_widths needs 4 entries")
        if self.stride != 2 ** BACKBONE_BLOCKS:
            raise ContractError(
                f"DetectorConfig: stride must be {2 ** BACKBONE_BLOCKS} "
                f"(three stride-2 blocks)"
            )
        if self.image_size % self.stride:
            raise ContractError("DetectorConfig: stride must divide image size")
        if self.head.startswith("om") and self.basis_rows > self.feature_dim:
            raise ContractError(
                f"DetectorConfig: cosine head needs C <= N, got "
                f"{self.basis_rows} prototypes for N={self.feature_dim}"
            )
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("DetectorConfig: batch_size and epochs must be >= 1")

    @property
    def head_outputs(self) -> int:
        return self.num_classes + (1 if self.head.endswith("softmax") else 0)

    @property
    def basis_rows(self) -> int:
        # softmax variant reserves one extra prototype for background
        return self.num_classes + (1 if self.head.endswith("softmax") else 0)

    @property
    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else 0.005 * self.batch_size / 8.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.stride


@dataclass
class DenseTargets:
    """Per-location training targets on the [Hs, Ws] grid."""

    cls: np.ndarray      # [Hs, Ws, C] one-hot-or-zero
    reg: np.ndarray      # [Hs, Ws, 4] (l, t, r, b) in stride units
    ctr: np.ndarray      # [Hs, Ws] centerness in [0, 1]
    pos_mask: np.ndarray  # [Hs, Ws] bool
    labels: np.ndarray   # [Hs, Ws] class id, or C for background


@dataclass
class Detection:
    box: tuple
    class_id: int
    score: float
    loc: int = -1  # flat grid index the detection decoded from


@dataclass
class TrainedModel:
    config: DetectorConfig
    params: dict            # name -> float64 ndarray
    basis: OrthoBasis | None


def grid_centers(hs: int, ws: int, stride: int) -> np.ndarray:
    """[Hs*Ws, 2] pixel centers (x, y) of every grid location, row-major."""
    ys, xs = np.mgrid[0:hs, 0:ws]
    return np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=-1).reshape(-1, 2)


def assign_targets(annotations, grid, num_classes: int,
                   center_radius: float = 1.5) -> DenseTargets:
    """FCOS center-sampling assignment on a single-level grid.

    A location is positive iff it lies strictly inside a box and within
    ``center_radius`` strides (L-inf) of that box center; overlaps resolve to
    the smaller box, earlier annotation on equal areas.
    """
    hs, ws, stride = grid
    centers = grid_centers(hs, ws, stride)
    x = centers[:, 0].reshape(hs, ws)
    y = centers[:, 1].reshape(hs, ws)

    labels = np.full((hs, ws), num_classes, dtype=np.int64)
    best_area = np.full((hs, ws), np.inf)
    reg = np.zeros((hs, ws, 4))
    for ann in annotations:
        x1, y1, x2, y2 = ann.box
        l, t = x - x1, y - y1
        r, b = x2 - x, y2 - y
        inside = (l > 0) & (t > 0) & (r > 0) & (b > 0)
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        rad = center_radius * stride
        near = (np.abs(x - cx) <= rad) & (np.abs(y - cy) <= rad)
        area = (x2 - x1) * (y2 - y1)
        take = inside & near & (area < best_area)
        if not take.any():
            continue
        best_area[take] = area
        labels[take] = ann.class_id
        offs = np.stack([l, t, r, b], axis=-1) / stride
        reg[take] = offs[take]

    pos = labels < num_classes
    cls = np.zeros((hs, ws, num_classes))
    ii, jj = np.nonzero(pos)
    cls[ii, jj, labels[ii, jj]] = 1.0

    ctr = np.zeros((hs, ws))
    if pos.any():
        l, t, r, b = (reg[..., k] for k in range(4))
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = (np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b))
        ctr[pos] = np.sqrt(ratio[pos])
    reg[~pos] = 0.0
    return DenseTargets(cls=cls, reg=reg, ctr=ctr, pos_mask=pos, labels=labels)


# ---------------------------------------------------------------------------
# parameters and forward graph


def _he(rng, cout, k, cin):
    return rng.standard_normal((cout, k, k, cin)) * math.sqrt(2.0 / (k * k * cin))


def init_params(config: DetectorConfig, basis: OrthoBasis | None = None) -> dict:
    """He-init trunk, small-variance prediction layers; head params last so
    trunk draws are identical across head kinds for a given seed.

    Dense sigmoid heads must start with background mostly silenced or the
    negatives' epoch-one gradient mass collapses the trunk. The linear head
    encodes that prior in its final bias; for the cosine head the same prior
    is encoded one layer down, by pointing the feature conv's bias at the
    direction whose cosine with every prototype is -1/sqrt(C).
    """
    rng = np.random.default_rng((config.seed, 101))
    w0, w1, w2, w3 = config.backbone_widths
    n = config.feature_dim
    p: dict[str, np.ndarray] = {}
    for i, (cin, cout) in enumerate([(3, w0), (w0, w1), (w1, w2)]):
        p[f"backbone.{i}.weight"] = _he(rng, cout, 3, cin)
        p[f"backbone.{i}.bias"] = np.zeros(cout)
    p["trunk.weight"] = _he(rng, w3, 3, w2)
    p["trunk.bias"] = np.zeros(w3)
    p["cls.0.weight"] = _he(rng, w3, 3, w3)
    p["cls.0.bias"] = np.zeros(w3)
    p["cls.1.weight"] = rng.standard_normal((n, 3, 3, w3)) * 0.01
    p["cls.1.bias"] = np.zeros(n)
    p["reg.0.weight"] = _he(rng, w3, 3, w3)
    p["reg.0.bias"] = np.zeros(w3)
    p["reg.1.weight"] = rng.standard_normal((5, 3, 3, w3)) * 0.01
    p["reg.1.bias"] = np.zeros(5)
    if config.head.startswith("om"):
        if basis is None:
            raise ContractError("init_params: om heads need the basis for the prior init")
        anti = -basis.basis.sum(axis=0)
        p["cls.1.bias"] = 4.0 * anti / np.linalg.norm(anti)
    else:
        p["head.weight"] = rng.standard_normal((config.head_outputs, n)) * 0.01
        bias = np.zeros(config.head_outputs)
        if config.head == "linear":
            bias[:] = -math.log((1.0 - 0.01) / 0.01)  # focal prior pi=0.01
        p["head.bias"] = bias
    return p


def build_basis(config: DetectorConfig) -> OrthoBasis | None:
    if not config.head.startswith("om"):
        return None
    return build_orthogonal_basis(config.seed, config.basis_rows,
                                  config.feature_dim, config.basis_kernel_size)


def _forward_rows(param_nodes: dict, basis: OrthoBasis | None, images: Node,
                  config: DetectorConfig) -> dict:
    """Shared forward graph; returns flattened per-location row nodes."""
    p = param_nodes
    x = images
    for i in range(BACKBONE_BLOCKS):
        x = ad.relu(ad.conv2d(x, p[f"backbone.{i}.weight"], stride=2, padding=1,
                              bias=p[f"backbone.{i}.bias"]))
    t = ad.relu(ad.conv2d(x, p["trunk.weight"], stride=1, padding=1, bias=p["trunk.bias"]))
    # anchor activation scales in the head: cosine gradients go as
    # 1/||feature||, and the scale-free cosine loss exerts no restoring force
    # on activation norms, so unpinned scales freeze the om head
    t = ad.channel_norm(t)

    c = ad.channel_norm(ad.relu(ad.conv2d(t, p["cls.0.weight"], stride=1, padding=1,
                                          bias=p["cls.0.bias"])))
    # cls.1 is an internal head conv (the scoring layer sits on top), so its
    # output is normalized like every other head activation
    feats = ad.channel_norm(ad.conv2d(c, p["cls.1.weight"], stride=1, padding=1,
                                      bias=p["cls.1.bias"]))

    r = ad.channel_norm(ad.relu(ad.conv2d(t, p["reg.0.weight"], stride=1, padding=1,
                                          bias=p["reg.0.bias"])))
    rraw = ad.conv2d(r, p["reg.1.weight"], stride=1, padding=1, bias=p["reg.1.bias"])

    batched = images.value.ndim == 4
    b = images.value.shape[0] if batched else 1
    hs = ws = config.grid_size
    m = b * hs * ws
    n = config.feature_dim

    if config.head.startswith("om"):
        scores = om_score(feats, basis).scores
        cls_rows = ad.reshape(scores, (m, config.head_outputs))
        if config.logit_scale != 1.0:
            cls_rows = ad.mul(cls_rows, config.logit_scale)
    else:
        logits = linear_score(feats, p["head.weight"], p["head.bias"])
        cls_rows = ad.reshape(logits, (m, config.head_outputs))

    axes = (0, 2, 3, 1) if batched else (1, 2, 0)
    feat_rows = ad.reshape(ad.transpose(feats, axes), (m, n))
    rrows = ad.reshape(ad.transpose(rraw, axes), (m, 5))
    reg_rows = ad.exp(ad.slice_cols(rrows, 0, 4))  # positive offsets, stride units
    ctr_rows = ad.reshape(ad.slice_cols(rrows, 4, 5), (m,))
    return {
        "cls_rows": cls_rows, "ctr_rows": ctr_rows, "reg_rows": reg_rows,
        "feat_rows": feat_rows, "batch": b, "hs": hs, "ws": ws,
    }


def _param_nodes(params: dict, trainable: bool) -> dict:
    make = ad.parameter if trainable else ad.constant
    return {name: make(arr) for name, arr in params.items()}


def forward(model: TrainedModel, image: np.ndarray, return_features: bool = False):
    """Run the detector on one [3,S,S] image.

    Returns (cls [Hs,Ws,Ch], ctr [Hs,Ws], reg [Hs,Ws,4]) value arrays, where
    Ch is C (or C+1 for softmax heads); cls holds scaled cosines for om heads
    and logits for linear heads; reg offsets are in stride units. With
    ``return_features`` a fourth [Hs,Ws,N] array (cls-head input) is added.
    """
    if image.shape != (3, model.config.image_size, model.config.image_size):
        raise ContractError(f"forward: bad image shape {image.shape}")
    nodes = _param_nodes(model.params, trainable=False)
    out = _forward_rows(nodes, model.basis, ad.constant(image), model.config)
    hs, ws = out["hs"], out["ws"]
    cls = out["cls_rows"].value.reshape(hs, ws, -1)
    ctr = out["ctr_rows"].value.reshape(hs, ws)
    reg = out["reg_rows"].value.reshape(hs, ws, 4)
    if return_features:
        feats = out["feat_rows"].value.reshape(hs, ws, -1)
        return cls, ctr, reg, feats
    return cls, ctr, reg


# ---------------------------------------------------------------------------
# training


def _flat_targets(targets: DenseTargets):
    hw = targets.cls.shape[0] * targets.cls.shape[1]
    return {
        "cls": targets.cls.reshape(hw, -1),
        "reg": targets.reg.reshape(hw, 4),
        "ctr": targets.ctr.reshape(hw),
        "labels": targets.labels.reshape(hw),
        "pos_idx": np.nonzero(targets.pos_mask.reshape(hw))[0],
    }


def _decode_rows(reg_rows: Node, pos_idx: np.ndarray, centers: np.ndarray,
                 stride: int) -> Node:
    """Decode positive-location offsets (stride units) into pixel boxes."""
    off = ad.take_rows(reg_rows, pos_idx)
    cx = ad.constant(centers[pos_idx, 0])
    cy = ad.constant(centers[pos_idx, 1])
    x1 = ad.sub(cx, ad.mul(ad.column(off, 0), float(stride)))
    y1 = ad.sub(cy, ad.mul(ad.column(off, 1), float(stride)))
    x2 = ad.add(cx, ad.mul(ad.column(off, 2), float(stride)))
    y2 = ad.add(cy, ad.mul(ad.column(off, 3), float(stride)))
    return ad.stack_columns([x1, y1, x2, y2])


def train(scenes, config: DetectorConfig, log_hook=None):
    """SGD training loop; returns (TrainedModel, per-epoch log records).

    The orthogonal basis never enters the optimizer. Loss per batch is
    focal (or cross-entropy) + GIoU + centerness BCE (+ opl_weight * OPL when
    enabled), each normalized by the positive count.
    """
    if not scenes:
        raise ContractError("train: empty dataset")
    basis = build_basis(config)
    params = init_params(config, basis)
    use_softmax = config.head.endswith("softmax")
    hs = ws = config.grid_size
    stride = config.stride
    centers = grid_centers(hs, ws, stride)
    grid = (hs, ws, stride)

    per_scene = []
    for s in scenes:
        tgt = assign_targets(s.annotations, grid, config.num_classes, config.center_radius)
        per_scene.append(_flat_targets(tgt))

    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    rng = np.random.default_rng((config.seed, 202))
    lr0 = config.resolved_lr
    hw = hs * ws
    log: list[dict] = []
    it = 0

    for epoch in range(1, config.epochs + 1):
        lr_epoch = lr0 * config.lr_decay ** sum(1 for d in config.decay_epochs if epoch >= d)
        order = rng.permutation(len(scenes))
        sums = {"cls": 0.0, "reg": 0.0, "ctr": 0.0, "aux": 0.0}
        nb = 0
        for start in range(0, len(order), config.batch_size):
            if it < config.warmup_iters:
                ramp = config.warmup_ratio + (1.0 - config.warmup_ratio) * it / config.warmup_iters
                lr = lr_epoch * ramp
            else:
                lr = lr_epoch
            it += 1
            idx = order[start:start + config.batch_size]
            images = np.stack([scenes[i].image for i in idx])
            cls_t = np.concatenate([per_scene[i]["cls"] for i in idx])
            reg_t = np.concatenate([per_scene[i]["reg"] for i in idx])
            ctr_t = np.concatenate([per_scene[i]["ctr"] for i in idx])
            labels_t = np.concatenate([per_scene[i]["labels"] for i in idx])
            pos_idx = np.concatenate(
                [per_scene[i]["pos_idx"] + k * hw for k, i in enumerate(idx)]
            ).astype(np.intp)
            batch_centers = np.tile(centers, (len(idx), 1))

            node_params = _param_nodes(params, trainable=True)
            out = _forward_rows(node_params, basis, ad.constant(images), config)

            if use_softmax:
                loss_cls = L.softmax_cross_entropy(out["cls_rows"], labels_t)
            else:
                loss_cls = L.sigmoid_focal_loss(out["cls_rows"], cls_t)

            if pos_idx.size:
                pred_boxes = _decode_rows(out["reg_rows"], pos_idx, batch_centers, stride)
                gt_off = reg_t[pos_idx] * stride
                gt_boxes = np.stack([
                    batch_centers[pos_idx, 0] - gt_off[:, 0],
                    batch_centers[pos_idx, 1] - gt_off[:, 1],
                    batch_centers[pos_idx, 0] + gt_off[:, 2],
                    batch_centers[pos_idx, 1] + gt_off[:, 3],
                ], axis=1)
                loss_reg = L.giou_loss(pred_boxes, gt_boxes)
                loss_ctr = L.centerness_loss(_take_vec(out["ctr_rows"], pos_idx),
                                             ctr_t[pos_idx])
            else:
                loss_reg = L.LossValue(ad.constant(0.0), 1.0, empty=True)
                loss_ctr = L.LossValue(ad.constant(0.0), 1.0, empty=True)

            total = ad.add(loss_cls.value, ad.add(loss_reg.value, loss_ctr.value))
            loss_aux = None
            if config.aux_loss == "opl" and pos_idx.size >= 2:
                feats_pos = ad.take_rows(out["feat_rows"], pos_idx)
                loss_aux = L.opl_loss(feats_pos, labels_t[pos_idx])
                total = ad.add(total, ad.mul(loss_aux.value, config.opl_weight))

            if not np.isfinite(total.value):
                raise NumericError(
                    f"train: non-finite loss at epoch {epoch}, batch {nb}: "
                    f"cls={float(loss_cls.value.value):.4g} "
                    f"reg={float(loss_reg.value.value):.4g} "
                    f"ctr={float(loss_ctr.value.value):.4g}"
                )
            ad.backward(total)
            for name, node in node_params.items():
                g = node.grad if node.grad is not None else np.zeros_like(params[name])
                g = g + config.weight_decay * params[name]
                velocity[name] = config.momentum * velocity[name] + g
                params[name] = params[name] - lr * velocity[name]

            sums["cls"] += float(loss_cls.value.value)
            sums["reg"] += float(loss_reg.value.value)
            sums["ctr"] += float(loss_ctr.value.value)
            sums["aux"] += float(loss_aux.value.value) if loss_aux else 0.0
            nb += 1

        rec = {
            "epoch": epoch,
            "loss_cls": sums["cls"] / nb,
            "loss_reg": sums["reg"] / nb,
            "loss_ctr": sums["ctr"] / nb,
            "loss_aux": sums["aux"] / nb,
            "lr": lr_epoch,
        }
        log.append(rec)
        if log_hook:
            log_hook(rec)

    return TrainedModel(config=config, params=params, basis=basis), log


def _take_vec(vec: Node, idx: np.ndarray) -> Node:
    """Gather entries of a 1-d node."""
    as2d = ad.reshape(vec, (vec.value.shape[0], 1))
    return ad.reshape(ad.take_rows(as2d, idx), (idx.shape[0],))


# ---------------------------------------------------------------------------
# inference


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _det_sort_key(d: Detection):
    return (-d.score, d.class_id, d.box)


def nms(detections, iou_threshold: float = 0.5):
    """Class-wise greedy suppression, deterministic under score ties."""
    if not (0.0 < iou_threshold < 1.0):
        raise ContractError("nms: iou_threshold must be in (0, 1)")
    kept: list[Detection] = []
    for det in sorted(detections, key=_det_sort_key):
        if all(k.class_id != det.class_id or iou(k.box, det.box) <= iou_threshold
               for k in kept):
            kept.append(det)
    return kept


def infer(model: TrainedModel, scene, score_threshold: float = 0.05,
          nms_iou: float = 0.5):
    """Decode, threshold and suppress detections for one scene."""
    if not (0.0 < score_threshold <= 1.0) or not (0.0 < nms_iou < 1.0):
        raise ContractError("infer: thresholds must lie in (0, 1)")
    config = model.config
    cls, ctr, reg = forward(model, scene.image)
    hs, ws = cls.shape[0], cls.shape[1]
    m = hs * ws
    cls_rows = cls.reshape(m, -1)
    if config.head.endswith("softmax"):
        z = cls_rows - cls_rows.max(axis=1, keepdims=True)
        e = np.exp(z)
        prob = (e / e.sum(axis=1, keepdims=True))[:, :config.num_classes]
    else:
        prob = _sigmoid(cls_rows)
    ctr_p = _sigmoid(ctr.reshape(m))
    score = np.clip(prob * ctr_p[:, None], 0.0, 1.0)

    centers = grid_centers(hs, ws, config.stride)
    off = reg.reshape(m, 4) * config.stride
    boxes = np.stack([
        centers[:, 0] - off[:, 0], centers[:, 1] - off[:, 1],
        centers[:, 0] + off[:, 2], centers[:, 1] + off[:, 3],
    ], axis=1)

    cands = []
    locs, cids = np.nonzero(score >= score_threshold)
    for loc, cid in zip(locs.tolist(), cids.tolist()):
        cands.append(Detection(
            box=clip_box(tuple(boxes[loc]), float(config.image_size)),
            class_id=cid,
            score=float(score[loc, cid]),
            loc=loc,
        ))
    return nms(cands, nms_iou)


# ---------------------------------------------------------------------------
# serialization


def save_model(model: TrainedModel, path) -> None:
    """uint32 header length, JSON header, then named float64-LE sections."""
    names = sorted(model.params)
    sections = []
    offset = 0
    for name in names:
        arr = model.params[name]
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": to_dict(model.config),
        "seed": model.config.seed,
        "basis": model.basis.to_json_dict() if model.basis is not None else None,
        "sections": sections,
        "total_elems": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(model.params[name].astype("<f8").tobytes() for name in names)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ContractError(f"load_model: {path} is not a model file")
    hlen = struct.unpack("<I", raw[:4])[0]
    header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ContractError(f"load_model: unsupported format {header.get('format_version')}")
    config = from_dict(DetectorConfig, header["config"])
    blob = np.frombuffer(raw, dtype="<f8", offset=4 + hlen)
    if blob.size != header["total_elems"]:
        raise ContractError("load_model: parameter blob size mismatch")
    params = {}
    for sec in header["sections"]:
        size = int(np.prod(sec["shape"])) if sec["shape"] else 1
        arr = blob[sec["offset"]:sec["offset"] + size].reshape(sec["shape"])
        params[sec["name"]] = arr.astype(np.float64)
    basis = basis_from_json_dict(header["basis"]) if header["basis"] else None
    return TrainedModel(config=config, params=params, basis=basis)
