"""Finite-difference verification cases for every differentiable op.

Each case builds a scalar-valued graph over freshly created leaf tensors and
returns the max relative error between analytic gradients and central
differences at eps (default 1e-5). Inputs are seeded away from the ops'
non-smooth points so the comparison is well posed; the full-model case pins
the sampled proposal/anchor structure so the loss is a continuous function
of the image.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import BackboneConfig, LscBlock, StageSpec
from .detector import Detector, ModelConfig
from .losses import LossConfig, head_loss, rpn_loss, smooth_l1_op, total_loss
from .roi_ops import RoI, RoiAlignConfig, affine_grid, grid_sample, ps_roi_align, roi_align
from .rpn import AnchorConfig, RpnTargets, assign_rpn_targets, generate_anchors, select_train_rois
from .stn_head import StnHead
from .tensor import Tensor, grad_check

DEFAULT_EPS = 1e-5
TOLERANCE = 1e-4


def _rng():
    return np.random.default_rng(1234)


def check_conv2d(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.conv2d(ts[0], ts[1], ts[2], (2, 1), (1, 2)))
    return grad_check(
        fn,
        [r.standard_normal((2, 3, 6, 5)), r.standard_normal((4, 3, 3, 2)), r.standard_normal(4)],
        eps,
    )


def check_linear(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.mul(T.linear(ts[0], ts[1], ts[2]), ts[3]))
    return grad_check(
        fn,
        [
            r.standard_normal((4, 5)),
            r.standard_normal((3, 5)),
            r.standard_normal(3),
            r.standard_normal((4, 3)),
        ],
        eps,
    )


def check_maxpool2d(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.mul(T.maxpool2d(ts[0], 3, 2, 1), ts[1]))
    return grad_check(fn, [r.standard_normal((1, 2, 7, 7)), r.standard_normal((1, 2, 4, 4))], eps)


def check_elementwise(eps: float) -> float:
    r = _rng()

    def fn(ts):
        a = T.relu(ts[0])
        b = T.add(a, ts[1])
        c = T.mul_scalar(b, 0.7)
        d = T.log(T.add_scalar(T.mul(c, c), 1.0))
        return T.sum_all(T.softmax(d))

    return grad_check(fn, [r.standard_normal((3, 4)) + 0.3, r.standard_normal((3, 4))], eps)


def check_global_avg_pool(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.mul(T.global_avg_pool(ts[0]), ts[1]))
    return grad_check(fn, [r.standard_normal((2, 3, 4, 5)), r.standard_normal((2, 3))], eps)


def check_channel_affine(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.channel_affine(ts[0], ts[1], ts[2]))
    return grad_check(
        fn, [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)], eps
    )


def check_lsc(eps: float) -> float:
    r = _rng()
    block = LscBlock(r, in_ch=6, mid_ch=3, out_ch=8, kernel=5)

    def fn(ts):
        block.a1.weight = ts[1]
        return T.sum_all(block(ts[0]))

    return grad_check(fn, [r.standard_normal((1, 6, 8, 8)), block.a1.weight.data.copy()], eps)


def check_roi_align(eps: float) -> float:
    r = _rng()
    rois = [RoI(0, 3.1, 2.4, 29.7, 27.3), RoI(0, -2.0, 5.5, 18.2, 40.0)]
    cfg = RoiAlignConfig(3, 0.25, None)
    fn = lambda ts: T.sum_all(roi_align(ts[0], rois, cfg))
    return grad_check(fn, [r.standard_normal((1, 2, 10, 9))], eps)


def check_ps_roi_align(eps: float) -> float:
    r = _rng()
    rois = [RoI(0, 0.9, 1.3, 5.8, 5.1)]
    cfg = RoiAlignConfig(2, 1.0, 2)
    fn = lambda ts: T.sum_all(ps_roi_align(ts[0], rois, cfg, 2, 2))
    return grad_check(fn, [r.standard_normal((1, 8, 7, 7))], eps)


def check_affine_grid(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(T.mul(affine_grid(ts[0], (2, 1, 4, 5)), ts[1]))
    return grad_check(fn, [r.standard_normal((2, 2, 3)) * 0.3, r.standard_normal((2, 4, 5, 2))], eps)


def check_grid_sample(eps: float) -> float:
    r = _rng()
    fn = lambda ts: T.sum_all(grid_sample(ts[0], ts[1]))
    return grad_check(
        fn, [r.standard_normal((2, 2, 6, 6)), r.uniform(-1.15, 1.15, (2, 3, 4, 2))], eps
    )


def check_localize(eps: float) -> float:
    # the full resampling chain: localization net -> grid -> sampler
    r = _rng()
    head = StnHead(r, 3, 7, 3, conv5_in=4, conv5=StageSpec(2, 1, 2))
    head.loc_fc2.weight.data = r.normal(0, 0.02, (6, 64))

    def fn(ts):
        return T.sum_all(head.resample(ts[0], ts[1]))

    return grad_check(fn, [r.standard_normal((2, 3, 7, 7)), r.standard_normal((2, 4, 7, 7))], eps)


def check_smooth_l1(eps: float) -> float:
    r = _rng()
    d = r.standard_normal(12) * 1.5
    d = d[np.abs(np.abs(d) - 1.0) > 0.05]  # stay away from the junction
    fn = lambda ts: T.sum_all(smooth_l1_op(ts[0]))
    return grad_check(fn, [d], eps)


def _rpn_loss_case():
    r = _rng()
    labels = np.array([1, 1, 0, 0, 0, -1, 0, 1])
    deltas = np.zeros((8, 4))
    deltas[labels == 1] = r.standard_normal((3, 4)) * 0.5
    targets = RpnTargets(labels, deltas, labels >= 0)
    return r, targets


def check_rpn_loss(eps: float) -> float:
    r, targets = _rpn_loss_case()

    def fn(ts):
        pair = T.softmax(ts[0])
        probs = T.pick(pair, np.arange(8), np.ones(8, dtype=int))
        res = rpn_loss(probs, targets, ts[1], LossConfig())
        return res.total

    return grad_check(fn, [r.standard_normal((8, 2)), r.standard_normal((8, 4))], eps)


def check_head_loss(eps: float) -> float:
    r = _rng()
    labels = np.array([0, 1, 2, 0, 1, 0])
    gt_deltas = np.zeros((6, 4))
    gt_deltas[labels > 0] = r.standard_normal((3, 4)) * 0.4

    def fn(ts):
        probs = T.softmax(ts[0])
        res = head_loss(probs, labels, ts[1], gt_deltas, LossConfig())
        return res.total

    return grad_check(fn, [r.standard_normal((6, 3)), r.standard_normal((6, 12))], eps)


def check_total_loss(eps: float) -> float:
    r, targets = _rpn_loss_case()
    labels = np.array([0, 2, 1])
    gt_deltas = np.zeros((3, 4))
    gt_deltas[labels > 0] = 0.3

    def fn(ts):
        pair = T.softmax(ts[0])
        probs = T.pick(pair, np.arange(8), np.ones(8, dtype=int))
        a = rpn_loss(probs, targets, ts[1], LossConfig())
        b = head_loss(T.softmax(ts[2]), labels, ts[3], gt_deltas, LossConfig())
        return total_loss(a.total, b.total)

    return grad_check(
        fn,
        [
            r.standard_normal((8, 2)),
            r.standard_normal((8, 4)),
            r.standard_normal((3, 3)),
            r.standard_normal((3, 12)),
        ],
        eps,
    )


def _micro_model() -> tuple[Detector, ModelConfig]:
    cfg = ModelConfig(
        preset="toy",
        backbone=BackboneConfig(
            conv1_out=4,
            stage2=StageSpec(2, 1, 1),
            stage3=StageSpec(2, 1, 2),
            stage4=StageSpec(4, 1, 1),
            stage5=StageSpec(4, 1, 2),
        ),
        anchors=AnchorConfig(scales=(6.0, 10.0), aspect_ratios=(1.0,)),
        rpn_mid_channels=4,
        lsc_mid_channels=2,
        lsc_kernel=5,
        rpn_batch_size=8,
        rois_per_image=6,
    )
    return Detector(cfg, seed=5), cfg


def check_full_model(eps: float) -> float:
    """End-to-end total loss as a function of the input image, with the
    sampled anchors and RoIs pinned to the base point's structure."""
    model, cfg = _micro_model()
    r = _rng()
    image = r.uniform(-1, 1, (1, 3, 16, 16))
    gt_boxes = np.array([[2.0, 3.0, 9.0, 8.0], [8.0, 9.0, 14.0, 15.0]])
    gt_classes = np.array([1, 2])

    anchors = generate_anchors(cfg.anchors, 2, 2)
    targets = assign_rpn_targets(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    with T.no_grad():
        base = model.forward(image, gt_boxes, gt_classes, phase="joint", rng=np.random.default_rng(3))
    rois, roi_labels, roi_targets = select_train_rois(
        base.proposals,
        base.proposal_scores,
        gt_boxes,
        gt_classes,
        np.random.default_rng(3),
        cfg.rois_per_image,
    )

    def fn(ts):
        res = model.forward(
            ts[0],
            gt_boxes,
            gt_classes,
            phase="joint",
            fixed_rois=rois,
            fixed_roi_labels=roi_labels,
            fixed_roi_targets=roi_targets,
            fixed_rpn_targets=targets,
        )
        return res.losses.total

    return grad_check(fn, [image], eps)


CASES = {
    "conv2d": check_conv2d,
    "linear": check_linear,
    "maxpool2d": check_maxpool2d,
    "elementwise": check_elementwise,
    "global_avg_pool": check_global_avg_pool,
    "channel_affine": check_channel_affine,
    "lsc": check_lsc,
    "roi_align": check_roi_align,
    "ps_roi_align": check_ps_roi_align,
    "affine_grid": check_affine_grid,
    "grid_sample": check_grid_sample,
    "localize": check_localize,
    "smooth_l1": check_smooth_l1,
    "rpn_loss": check_rpn_loss,
    "head_loss": check_head_loss,
    "total_loss": check_total_loss,
    "full_model": check_full_model,
}


def run(names: list[str] | None = None, eps: float = DEFAULT_EPS) -> dict[str, float]:
    chosen = names or sorted(CASES)
    results = {}
    for name in chosen:
        if name not in CASES:
            raise KeyError(f"unknown gradcheck op: {name}")
        results[name] = CASES[name](eps)
    return results
