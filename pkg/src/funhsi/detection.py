"""Anchor-free detection on the feature pyramid.

A location predicts a class score, distances (l, t, r, b) to the box edges
and a centerness score. Assignment: a location is positive for the ground
truth box that contains it, provided max(l,t,r,b) falls in the level's scale
range; overlaps resolve to the smallest box. Losses are focal (classes),
1 - IoU (boxes, positives only) and binary cross-entropy (centerness,
positives only).

Coordinates: boxes are (x_min, y_min, x_max, y_max) in full-resolution
pixels, x along columns. A grid cell (i, j) at stride s sits at
x = (j + 0.5) s, y = (i + 0.5) s.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .blocks import _conv_init, _linear_init
from .tensor import (
    ContractError,
    DiffTensor,
    add,
    concat,
    conv2d,
    div,
    gelu,
    linear,
    minimum,
    mul,
    narrow,
    power,
    reshape,
    sigmoid,
    softplus,
    sub,
    take,
    tmean,
    texp,
)

# scale ranges (max regression distance, pixels) per pyramid level,
# parallel to strides (8, 4, 2)
LEVEL_RANGES = ((0.0, 32.0), (32.0, 64.0), (64.0, math.inf))

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: tuple  # (x_min, y_min, x_max, y_max)

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ContractError("degenerate box %r" % (self.box,))


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple


@dataclass
class LevelOutputs:
    """Head outputs at one pyramid level; ltrb is already in pixels."""

    cls: DiffTensor  # [.., Hl, Wl, num_classes]
    ltrb: DiffTensor  # [.., Hl, Wl, 4], positive
    ctr: DiffTensor  # [.., Hl, Wl, 1]


@dataclass
class LevelTargets:
    cls: np.ndarray  # [.., Hl, Wl] int64, -1 for background
    ltrb: np.ndarray  # [.., Hl, Wl, 4]
    ctr: np.ndarray  # [.., Hl, Wl]


class DetectionHead:
    """Shared two-conv towers over lateral projections of the pyramid.

    Regression is exp(scale_level * raw) * stride, one learnable scalar per
    level, so a zero raw output starts at one stride worth of extent.
    """

    def __init__(self, in_channels, num_classes, head_channels, rng,
                 dtype=np.float32, prior_prob=0.01):
        self.num_classes = num_classes
        self.lat = [_linear_init(rng, c, head_channels, dtype) for c in in_channels]
        self.cls_tower = [
            _conv_init(rng, 3, 3, head_channels, head_channels, dtype) for _ in range(2)
        ]
        self.reg_tower = [
            _conv_init(rng, 3, 3, head_channels, head_channels, dtype) for _ in range(2)
        ]
        self.cls_out = _conv_init(rng, 3, 3, head_channels, num_classes, dtype)
        # rare-positive prior keeps early focal loss from swamping the model
        self.cls_out[1].data[:] = -math.log((1.0 - prior_prob) / prior_prob)
        self.reg_out = _conv_init(rng, 3, 3, head_channels, 4, dtype)
        self.ctr_out = _conv_init(rng, 3, 3, head_channels, 1, dtype)
        self.scales = [
            DiffTensor(np.ones((), dtype=dtype), requires_grad=True) for _ in in_channels
        ]

    def items(self):
        for i, (w, b) in enumerate(self.lat):
            yield "lat%d.w" % i, w
            yield "lat%d.b" % i, b
        for i, (k, b) in enumerate(self.cls_tower):
            yield "cls%d.k" % i, k
            yield "cls%d.b" % i, b
        for i, (k, b) in enumerate(self.reg_tower):
            yield "reg%d.k" % i, k
            yield "reg%d.b" % i, b
        yield "cls_out.k", self.cls_out[0]
        yield "cls_out.b", self.cls_out[1]
        yield "reg_out.k", self.reg_out[0]
        yield "reg_out.b", self.reg_out[1]
        yield "ctr_out.k", self.ctr_out[0]
        yield "ctr_out.b", self.ctr_out[1]
        for i, s in enumerate(self.scales):
            yield "scale%d" % i, s


def _tower(x, convs):
    for k, b in convs:
        x = gelu(add(conv2d(x, k, stride=1, padding=1), b))
    return x


def head_forward(head, feats, strides):
    """Run the shared head over pyramid features; returns LevelOutputs per level."""
    outs = []
    for i, (f, stride) in enumerate(zip(feats, strides)):
        w, b = head.lat[i]
        latf = gelu(linear(f, w, b))
        cls_t = _tower(latf, head.cls_tower)
        reg_t = _tower(latf, head.reg_tower)
        cls = add(conv2d(cls_t, head.cls_out[0], stride=1, padding=1), head.cls_out[1])
        raw = add(conv2d(reg_t, head.reg_out[0], stride=1, padding=1), head.reg_out[1])
        ltrb = mul(texp(mul(raw, head.scales[i])), float(stride))
        ctr = add(conv2d(reg_t, head.ctr_out[0], stride=1, padding=1), head.ctr_out[1])
        outs.append(LevelOutputs(cls=cls, ltrb=ltrb, ctr=ctr))
    return outs


# ------------------------------------------------------------- assignment


def _centers(stride, hl, wl):
    ys = (np.arange(hl) + 0.5) * stride
    xs = (np.arange(wl) + 0.5) * stride
    return ys, xs


def centerness(l, t, r, b):
    return math.sqrt(
        (min(l, r) / max(l, r)) * (min(t, b) / max(t, b))
    )


def assign_targets(annotations, geoms, ranges=LEVEL_RANGES):
    """Per-level targets for one image.

    geoms: list of (stride, Hl, Wl) parallel to `ranges`. Returns a list of
    LevelTargets; cls is -1 where background.
    """
    out = []
    for (stride, hl, wl), (lo, hi) in zip(geoms, ranges):
        cls = np.full((hl, wl), -1, dtype=np.int64)
        ltrb = np.zeros((hl, wl, 4), dtype=np.float64)
        ctr = np.zeros((hl, wl), dtype=np.float64)
        best_area = np.full((hl, wl), np.inf)
        ys, xs = _centers(stride, hl, wl)
        for ann in annotations:
            x0, y0, x1, y1 = ann.box
            area = (x1 - x0) * (y1 - y0)
            li = xs[None, :] - x0
            ti = ys[:, None] - y0
            ri = x1 - xs[None, :]
            bi = y1 - ys[:, None]
            dists = np.stack(np.broadcast_arrays(li, ti, ri, bi), axis=-1)
            inside = dists.min(axis=-1) > 0.0
            dmax = dists.max(axis=-1)
            hit = inside & (dmax > lo) & (dmax <= hi) & (area < best_area)
            if not hit.any():
                continue
            best_area[hit] = area
            cls[hit] = ann.class_id
            d_hit = dists[hit]
            ltrb[hit] = d_hit
            lr = d_hit[:, [0, 2]]
            tb = d_hit[:, [1, 3]]
            ctr[hit] = np.sqrt(
                (lr.min(axis=-1) / lr.max(axis=-1)) * (tb.min(axis=-1) / tb.max(axis=-1))
            )
        out.append(LevelTargets(cls=cls, ltrb=ltrb, ctr=ctr))
    return out


def stack_targets(per_image):
    """Stack per-image target lists into batched LevelTargets."""
    n_levels = len(per_image[0])
    out = []
    for lv in range(n_levels):
        out.append(
            LevelTargets(
                cls=np.stack([ti[lv].cls for ti in per_image]),
                ltrb=np.stack([ti[lv].ltrb for ti in per_image]),
                ctr=np.stack([ti[lv].ctr for ti in per_image]),
            )
        )
    return out


# ------------------------------------------------------------------ losses


def _flatten_outputs(outputs):
    cls = [reshape(o.cls, (-1, o.cls.shape[-1])) for o in outputs]
    ltrb = [reshape(o.ltrb, (-1, 4)) for o in outputs]
    ctr = [reshape(o.ctr, (-1,)) for o in outputs]
    return concat(cls, 0), concat(ltrb, 0), concat(ctr, 0)


def _flatten_targets(targets):
    cls = np.concatenate([t.cls.reshape(-1) for t in targets])
    ltrb = np.concatenate([t.ltrb.reshape(-1, 4) for t in targets])
    ctr = np.concatenate([t.ctr.reshape(-1) for t in targets])
    return cls, ltrb, ctr


def focal_loss(logits, cls_target, num_pos, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Sigmoid focal loss summed over all locations/classes, / num_pos.

    Written in softplus form: -log sigmoid(x) = softplus(-x), so no log of a
    saturating probability appears.
    """
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    pos = cls_target >= 0
    onehot[pos, cls_target[pos]] = 1.0
    t = DiffTensor(onehot)
    neg_x = mul(logits, -1.0)
    one_minus_p = sigmoid(neg_x)
    pos_term = mul(mul(t, alpha), mul(power(one_minus_p, gamma), softplus(neg_x)))
    p = sigmoid(logits)
    neg_term = mul(mul(sub(1.0, t), 1.0 - alpha), mul(power(p, gamma), softplus(logits)))
    total = add(pos_term, neg_term).sum()
    return mul(total, 1.0 / max(num_pos, 1))


def iou_of_distances(pred, target):
    """IoU of two boxes sharing the anchor location, given as (l,t,r,b) rows."""
    cols_p = [narrow(pred, -1, i, 1) for i in range(4)]
    cols_t = [narrow(target, -1, i, 1) for i in range(4)]
    lp, tp, rp, bp = cols_p
    lt, tt, rt, bt = cols_t
    inter_w = add(minimum(lp, lt), minimum(rp, rt))
    inter_h = add(minimum(tp, tt), minimum(bp, bt))
    inter = mul(inter_w, inter_h)
    area_p = mul(add(lp, rp), add(tp, bp))
    area_t = mul(add(lt, rt), add(tt, bt))
    union = sub(add(area_p, area_t), inter)
    return reshape(div(inter, union), (pred.shape[0],))


def detection_loss(outputs, targets):
    """(L_reg, L_cls, L_ctr) for batched (or single-image) outputs.

    The three terms are scalars; L_reg and L_ctr are zero when the batch has
    no positive location.
    """
    cls_flat, ltrb_flat, ctr_flat = _flatten_outputs(outputs)
    cls_t, ltrb_t, ctr_t = _flatten_targets(targets)
    if cls_flat.shape[0] != cls_t.shape[0]:
        raise ContractError(
            "detection_loss: %d output locations vs %d targets"
            % (cls_flat.shape[0], cls_t.shape[0])
        )
    pos_idx = np.flatnonzero(cls_t >= 0)
    num_pos = int(pos_idx.size)
    l_cls = focal_loss(cls_flat, cls_t, num_pos)
    if num_pos == 0:
        zero = DiffTensor(np.zeros((), dtype=cls_flat.dtype))
        return zero, l_cls, zero
    pred_pos = take(ltrb_flat, pos_idx)
    tgt_pos = DiffTensor(ltrb_t[pos_idx].astype(ltrb_flat.dtype))
    l_reg = tmean(sub(1.0, iou_of_distances(pred_pos, tgt_pos)))
    ctr_pos = take(ctr_flat, pos_idx)
    ctr_tgt = DiffTensor(ctr_t[pos_idx].astype(ctr_flat.dtype))
    l_ctr = tmean(sub(softplus(ctr_pos), mul(ctr_pos, ctr_tgt)))
    return l_reg, l_cls, l_ctr


# ----------------------------------------------------------------- decoding


def iou(a, b):
    """IoU of two (x_min, y_min, x_max, y_max) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _det_order(d):
    return (-d.score, d.box[0], d.box[1], d.box[2], d.box[3], d.class_id)


def nms(dets, iou_thresh):
    """Greedy class-wise suppression; input order does not matter."""
    kept = []
    for class_id in sorted({d.class_id for d in dets}):
        pool = sorted((d for d in dets if d.class_id == class_id), key=_det_order)
        chosen = []
        for d in pool:
            if all(iou(d.box, c.box) < iou_thresh for c in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return sorted(kept, key=_det_order)


def decode(outputs, geoms, score_thresh=0.05, nms_iou=0.5):
    """Detections for ONE image from per-level head outputs.

    score = sigmoid(cls) * sigmoid(centerness); boxes are clipped to the
    image; ordering is deterministic (score desc, then coordinates).
    """
    cands = []
    img_h = geoms[0][0] * geoms[0][1]
    img_w = geoms[0][0] * geoms[0][2]
    for out, (stride, hl, wl) in zip(outputs, geoms):
        cls = out.cls.data if isinstance(out.cls, DiffTensor) else out.cls
        ltrb = out.ltrb.data if isinstance(out.ltrb, DiffTensor) else out.ltrb
        ctr = out.ctr.data if isinstance(out.ctr, DiffTensor) else out.ctr
        score = expit(cls) * expit(ctr)  # ctr is [Hl,Wl,1], broadcasts over classes
        ys, xs = _centers(stride, hl, wl)
        ii, jj, kk = np.nonzero(score > score_thresh)
        for i, j, k in zip(ii, jj, kk):
            l, t, r, b = ltrb[i, j]
            box = (
                float(np.clip(xs[j] - l, 0.0, img_w)),
                float(np.clip(ys[i] - t, 0.0, img_h)),
                float(np.clip(xs[j] + r, 0.0, img_w)),
                float(np.clip(ys[i] + b, 0.0, img_h)),
            )
            if box[0] >= box[2] or box[1] >= box[3]:
                continue
            cands.append(Detection(class_id=int(k), score=float(score[i, j, k]), box=box))
    return nms(cands, nms_iou)


# --------------------------------------------------------------- evaluation


def average_precision(records, n_gt):
    """All-point AP from (is_tp) flags already sorted by rank. records: bool list."""
    if n_gt == 0:
        return None
    tp = np.cumsum([1.0 if r else 0.0 for r in records])
    fp = np.cumsum([0.0 if r else 1.0 for r in records])
    if tp.size == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, then sum area under the step curve
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_50(dets_per_image, anns_per_image, num_classes, iou_thresh=0.5):
    """Mean AP at IoU 0.5; classes absent from the ground truth are skipped."""
    aps = []
    for c in range(num_classes):
        gt_boxes = [
            [a.box for a in anns if a.class_id == c] for anns in anns_per_image
        ]
        n_gt = sum(len(b) for b in gt_boxes)
        if n_gt == 0:
            continue
        pool = []
        for img, dets in enumerate(dets_per_image):
            for d in dets:
                if d.class_id == c:
                    pool.append((img, d))
        pool.sort(key=lambda p: (-p[1].score, p[0]) + p[1].box)
        used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        flags = []
        for img, d in pool:
            best, best_v = -1, 0.0
            for gi, gbox in enumerate(gt_boxes[img]):
                if used[img][gi]:
                    continue
                v = iou(d.box, gbox)
                if v > best_v:  # strict: ties keep the first candidate
                    best, best_v = gi, v
            if best >= 0 and best_v >= iou_thresh:
                used[img][best] = True
                flags.append(True)
            else:
                flags.append(False)
        aps.append(average_precision(flags, n_gt))
    return float(np.mean(aps)) if aps else 0.0
