"""Region proposal machinery: anchors, box deltas, target assignment, NMS.

Box coordinates are (x1, y1, x2, y2) floats in image pixels. All functions
here are pure and deterministic; sampling takes an explicit RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import Conv2d, Module
from .tensor import Array, Tensor


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...]
    base_stride: int = 8

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @staticmethod
    def paper() -> "AnchorConfig":
        # 8 geometric scales x 5 ratios = 40 anchors, matching the 80/160
        # channel RPN heads
        scales = tuple(16.0 * (362.0 / 16.0) ** (i / 7.0) for i in range(8))
        return AnchorConfig(scales=scales, aspect_ratios=(0.25, 0.5, 1.0, 2.0, 4.0))

    @staticmethod
    def toy() -> "AnchorConfig":
        return AnchorConfig(scales=(8.0, 16.0, 32.0), aspect_ratios=(0.5, 1.0, 2.0))


@dataclass
class RpnTargets:
    labels: Array  # per anchor: 1 positive, 0 negative, -1 ignore
    deltas: Array  # (N,4), defined only where labels == 1
    sampled: Array  # bool mask of anchors entering the loss


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int) -> Array:
    """All anchors for a feature map, (H*W*A, 4); row-major locations,
    ratio-major then scale within a location."""
    if not cfg.scales or not cfg.aspect_ratios:
        raise ValueError("anchor config must list scales and ratios")
    stride = cfg.base_stride
    shapes = np.array(
        [
            (s * np.sqrt(r), s / np.sqrt(r))
            for r in cfg.aspect_ratios
            for s in cfg.scales
        ]
    )  # (A, 2) as (w, h)
    cx = (np.arange(feat_w) * stride + stride / 2.0)[None, :, None]
    cy = (np.arange(feat_h) * stride + stride / 2.0)[:, None, None]
    w = shapes[None, None, :, 0]
    h = shapes[None, None, :, 1]
    anchors = np.stack(
        np.broadcast_arrays(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), axis=-1
    )
    return anchors.reshape(-1, 4)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: Array, b: Array) -> Array:
    """Pairwise IoU of (N,4) vs (M,4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0,
        None,
    )
    ih = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0,
        None,
    )
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_deltas(proposal, gt) -> tuple[float, float, float, float]:
    """(tx, ty, tw, th) regression target of gt relative to proposal."""
    px1, py1, px2, py2 = proposal
    gx1, gy1, gx2, gy2 = gt
    pw, ph = px2 - px1, py2 - py1
    if pw <= 0 or ph <= 0:
        raise ValueError("proposal must have positive width and height")
    tx = ((gx1 + gx2) / 2 - (px1 + px2) / 2) / pw
    ty = ((gy1 + gy2) / 2 - (py1 + py2) / 2) / ph
    tw = np.log((gx2 - gx1) / pw)
    th = np.log((gy2 - gy1) / ph)
    return float(tx), float(ty), float(tw), float(th)


def encode_deltas_batch(proposals: Array, gts: Array) -> Array:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("proposals must have positive width and height")
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    tx = ((gts[:, 0] + gts[:, 2]) - (proposals[:, 0] + proposals[:, 2])) / 2 / pw
    ty = ((gts[:, 1] + gts[:, 3]) - (proposals[:, 1] + proposals[:, 3])) / 2 / ph
    return np.stack([tx, ty, np.log(gw / pw), np.log(gh / ph)], axis=1)


# cap on log size deltas before exponentiation (an ~60x growth), so wild
# regression outputs cannot overflow into inf-sized boxes
DELTA_CLIP = float(np.log(1000.0 / 16.0))


def decode_deltas(deltas: Array, boxes: Array, clip: float | None = None) -> Array:
    """Inverse of encode: apply (tx, ty, tw, th) rows onto boxes."""
    pw = boxes[:, 2] - boxes[:, 0]
    ph = boxes[:, 3] - boxes[:, 1]
    tw, th = deltas[:, 2], deltas[:, 3]
    if clip is not None:
        tw = np.clip(tw, -clip, clip)
        th = np.clip(th, -clip, clip)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2 + deltas[:, 0] * pw
    cy = (boxes[:, 1] + boxes[:, 3]) / 2 + deltas[:, 1] * ph
    w = pw * np.exp(tw)
    h = ph * np.exp(th)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: Array, img_w: float, img_h: float) -> Array:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, img_w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, img_h)
    return out


def assign_rpn_targets(
    anchors: Array, gt_boxes: Array, pos_iou: float = 0.7, neg_iou: float = 0.3
) -> RpnTargets:
    """Label anchors against ground truth.

    Positive when IoU >= pos_iou with any gt or when the anchor is the best
    match of some gt (ties to the lowest anchor index); negative when the max
    IoU is below neg_iou; ignored otherwise. With no gt boxes every anchor is
    negative.
    """
    if pos_iou <= neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
        return RpnTargets(labels, deltas, labels >= 0)
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    labels[ious.argmax(axis=0)] = 1  # every gt keeps at least one positive
    pos = labels == 1
    deltas[pos] = encode_deltas_batch(anchors[pos], gt_boxes[best_gt[pos]])
    return RpnTargets(labels, deltas, labels >= 0)


def sample_rpn_targets(
    targets: RpnTargets, batch_size: int, pos_fraction: float, rng: np.random.Generator
) -> RpnTargets:
    """Restrict the sampled mask to a fixed-size anchor batch."""
    if batch_size <= 0:
        targets.sampled = targets.labels >= 0
        return targets
    pos_idx = np.flatnonzero(targets.labels == 1)
    neg_idx = np.flatnonzero(targets.labels == 0)
    n_pos = min(len(pos_idx), int(round(batch_size * pos_fraction)))
    if len(pos_idx) > n_pos:
        pos_idx = rng.permutation(pos_idx)[:n_pos]
    n_neg = min(len(neg_idx), batch_size - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = rng.permutation(neg_idx)[:n_neg]
    mask = np.zeros_like(targets.labels, dtype=bool)
    mask[pos_idx] = True
    mask[neg_idx] = True
    targets.sampled = mask
    return targets


def nms(boxes: Array, scores: Array, iou_thresh: float, max_keep: int | None = None) -> list[int]:
    """Greedy descending-score suppression; ties broken by lower index.

    A box is removed iff its IoU with an already kept box exceeds iou_thresh.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores length mismatch")
    n = boxes.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    bo = boxes[order]
    x1, y1, x2, y2 = bo[:, 0], bo[:, 1], bo[:, 2], bo[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(n, dtype=bool)
    keep: list[int] = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        sl = slice(pos + 1, n)
        iw = np.minimum(x2[pos], x2[sl]) - np.maximum(x1[pos], x1[sl])
        ih = np.minimum(y2[pos], y2[sl]) - np.maximum(y1[pos], y1[sl])
        np.clip(iw, 0, None, out=iw)
        np.clip(ih, 0, None, out=ih)
        inter = iw
        inter *= ih
        union = areas[sl] + (areas[pos] - inter)
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        alive[sl][ov > iou_thresh] = False
    return keep


def propose(
    fg_probs: Array,
    deltas: Array,
    anchors: Array,
    img_size: tuple[int, int],
    phase: str,
    nms_thresh_train: float = 0.7,
    nms_thresh_infer: float = 0.5,
    max_after_nms: int = 600,
    min_side: float = 1.0,
) -> tuple[Array, Array]:
    """Decode anchors into scored proposals: clip, drop tiny boxes, NMS at the
    phase threshold, keep at most `max_after_nms` by score.

    Returns (boxes (R,4), scores (R,)) sorted by descending score.
    """
    if phase not in ("train", "infer"):
        raise ValueError(f"bad phase: {phase}")
    img_w, img_h = img_size
    boxes = decode_deltas(deltas, anchors, clip=DELTA_CLIP)
    boxes = clip_boxes(boxes, img_w, img_h)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    valid = (w >= min_side) & (h >= min_side)
    boxes, scores = boxes[valid], fg_probs[valid]
    if boxes.shape[0] == 0:
        return np.zeros((0, 4)), np.zeros(0)
    thresh = nms_thresh_train if phase == "train" else nms_thresh_infer
    keep = nms(boxes, scores, thresh, max_keep=max_after_nms)
    return boxes[keep], scores[keep]


def select_train_rois(
    boxes: Array,
    scores: Array,
    gt_boxes: Array,
    gt_classes: Array,
    rng: np.random.Generator,
    n: int = 128,
    pos_fraction: float = 0.25,
    fg_iou: float = 0.5,
) -> tuple[Array, Array, Array]:
    """Sample the head's training RoIs from the proposal pool.

    Returns (rois (n,4), labels (n,), target deltas (n,4)); labels are 0 for
    background and the gt class otherwise. Pads with negatives and
    repeat-samples when proposals are scarce.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    if gt_boxes.shape[0] == 0:
        labels = np.zeros(boxes.shape[0], dtype=np.int64)
        best_gt = np.zeros(boxes.shape[0], dtype=np.intp)
        max_iou = np.zeros(boxes.shape[0])
    else:
        ious = iou_matrix(boxes, gt_boxes)
        best_gt = ious.argmax(axis=1)
        max_iou = ious[np.arange(boxes.shape[0]), best_gt]
        labels = np.where(max_iou >= fg_iou, np.asarray(gt_classes)[best_gt], 0).astype(np.int64)
    fg_idx = np.flatnonzero(labels > 0)
    bg_idx = np.flatnonzero(labels == 0)
    n_fg = min(len(fg_idx), int(round(n * pos_fraction)))
    if len(fg_idx) > n_fg:
        fg_idx = rng.permutation(fg_idx)[:n_fg]
    n_bg = min(len(bg_idx), n - len(fg_idx))
    if len(bg_idx) > n_bg:
        bg_idx = rng.permutation(bg_idx)[:n_bg]
    chosen = np.concatenate([fg_idx, bg_idx]).astype(np.intp)
    if chosen.size == 0:
        chosen = np.arange(boxes.shape[0], dtype=np.intp)
    if chosen.size < n:  # repeat-sample to fill the batch
        extra = rng.choice(chosen, size=n - chosen.size, replace=True)
        chosen = np.concatenate([chosen, extra])
    rois = boxes[chosen]
    roi_labels = labels[chosen]
    target = np.zeros((n, 4))
    pos = roi_labels > 0
    if pos.any():
        target[pos] = encode_deltas_batch(rois[pos], gt_boxes[best_gt[chosen[pos]]])
    return rois, roi_labels, target


class RpnHead(Module):
    """3x3 conv trunk with twin 1x1 heads: 2A objectness and 4A box channels."""

    def __init__(self, rng: np.random.Generator, in_ch: int, mid_ch: int, num_anchors: int):
        self.num_anchors = num_anchors
        self.conv = Conv2d(rng, in_ch, mid_ch, 3, 1, 1, bias=True)
        self.cls = Conv2d(rng, mid_ch, 2 * num_anchors, 1, bias=True)
        self.bbox = Conv2d(rng, mid_ch, 4 * num_anchors, 1, bias=True)

    def __call__(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        h = T.relu(self.conv(feat))
        return self.cls(h), self.bbox(h)

    def flatten_outputs(self, cls: Tensor, bbox: Tensor) -> tuple[Tensor, Tensor]:
        """Reorder head maps to per-anchor rows matching generate_anchors.

        cls (N,2A,H,W) -> fg probs (N*H*W*A,); bbox (N,4A,H,W) -> (N*H*W*A,4).
        """
        n, _, h, w = cls.shape
        a = self.num_anchors
        pairs = T.reshape(T.permute(cls, (0, 2, 3, 1)), (n * h * w * a, 2))
        probs = T.softmax(pairs)
        rows = np.arange(n * h * w * a)
        fg = T.pick(probs, rows, np.ones_like(rows))
        deltas = T.reshape(T.permute(bbox, (0, 2, 3, 1)), (n * h * w * a, 4))
        return fg, deltas
