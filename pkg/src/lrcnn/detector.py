"""Full-model assembly: twin-tap backbone, RPN, pooled heads, training loop,
inference, and weight checkpoints.

The same RoI list always feeds both pooling paths: the position-sensitive
pooling over the separable-convolution score maps and the standard RoIAlign
over the deeper tap.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import Backbone, BackboneConfig, LscBlock, Module
from .losses import LossConfig, LossResult, head_loss, rpn_loss, total_loss
from .roi_ops import RoiAlignConfig, ps_roi_align, roi_align
from .rpn import (
    DELTA_CLIP,
    AnchorConfig,
    RpnHead,
    RpnTargets,
    assign_rpn_targets,
    clip_boxes,
    decode_deltas,
    generate_anchors,
    nms,
    propose,
    sample_rpn_targets,
    select_train_rois,
)
from .stn_head import StnHead
from .tensor import Array, Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    preset: str
    backbone: BackboneConfig
    anchors: AnchorConfig
    rpn_mid_channels: int
    lsc_mid_channels: int
    lsc_kernel: int = 15
    pooled_size: int = 7
    num_fg_classes: int = 2
    roi_sampling_points: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch_size: int = 256
    rpn_pos_fraction: float = 0.5
    nms_thresh_train: float = 0.7
    nms_thresh_infer: float = 0.5
    max_rois_after_nms: int = 600
    rois_per_image: int = 128
    head_pos_fraction: float = 0.25
    head_fg_iou: float = 0.5
    score_threshold: float = 0.05
    # during joint training, add the gt boxes to the head's candidate RoIs so
    # the classifier sees positives before the RPN warms up
    append_gt_to_rois: bool = True

    @property
    def num_classes(self) -> int:
        return self.num_fg_classes + 1

    @property
    def spatial_scale(self) -> float:
        return 1.0 / self.backbone.total_stride

    def roi_align_config(self) -> RoiAlignConfig:
        return RoiAlignConfig(self.pooled_size, self.spatial_scale, self.roi_sampling_points)

    @staticmethod
    def paper(stn_source: str = "conv3_x") -> "ModelConfig":
        return ModelConfig(
            preset="paper",
            backbone=BackboneConfig.paper(stn_source),
            anchors=AnchorConfig.paper(),
            rpn_mid_channels=512,
            lsc_mid_channels=256,
        )

    @staticmethod
    def toy(stn_source: str = "conv3_x") -> "ModelConfig":
        return ModelConfig(
            preset="toy",
            backbone=BackboneConfig.toy(stn_source),
            anchors=AnchorConfig.toy(),
            rpn_mid_channels=32,
            lsc_mid_channels=16,
        )


@dataclass
class Detection:
    class_id: int  # 1 small-vehicle, 2 large-vehicle; background never emitted
    score: float
    box: tuple[float, float, float, float]


@dataclass
class LossBundle:
    rpn: LossResult
    head: LossResult
    total: Tensor

    def parts(self) -> dict[str, float]:
        return {
            "rpn_cls": self.rpn.cls.item(),
            "rpn_reg": self.rpn.reg.item(),
            "head_cls": self.head.cls.item(),
            "head_reg": self.head.reg.item(),
            "total": self.total.item(),
        }


@dataclass
class ForwardResult:
    proposals: Array
    proposal_scores: Array
    rois: Array
    roi_labels: Array | None
    roi_targets: Array | None
    class_probs: Tensor | None
    box_deltas: Tensor | None
    losses: LossBundle | None


def normalize_image(image: Array) -> Array:
    """uint8 HWC image -> float64 (1,3,H,W) in [-1, 1]."""
    arr = np.asarray(image, dtype=np.float64) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HWC rgb image, got shape {arr.shape}")
    return ((arr - 0.5) * 2.0).transpose(2, 0, 1)[None]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        k, c = cfg.pooled_size, cfg.num_classes
        self.backbone = Backbone(rng, cfg.backbone)
        self.rpn = RpnHead(rng, cfg.backbone.conv4_out, cfg.rpn_mid_channels, cfg.anchors.num_anchors)
        self.lsc = LscBlock(rng, cfg.backbone.stn_source_out, cfg.lsc_mid_channels, k * k * c, cfg.lsc_kernel)
        self.head = StnHead(
            rng,
            c,
            k,
            c,
            cfg.backbone.conv4_out,
            cfg.backbone.stage5,
            residual_scale=cfg.backbone.residual_scale,
        )

    # ------------------------------------------------------------------
    def forward(
        self,
        image: Array,
        gt_boxes: Array | None = None,
        gt_classes: Array | None = None,
        phase: str = "infer",
        rng: np.random.Generator | None = None,
        record: dict | None = None,
        fixed_rois: Array | None = None,
        fixed_roi_labels: Array | None = None,
        fixed_roi_targets: Array | None = None,
        fixed_rpn_targets: RpnTargets | None = None,
    ) -> ForwardResult:
        """Run the two-stage pipeline on a normalized (1,3,H,W) image.

        phase: "rpn" (RPN loss only, head skipped), "joint" (both losses) or
        "infer" (no losses, inference NMS threshold and top-k RoI selection).
        The fixed_* arguments pin the sampled structure so the loss is a
        deterministic continuous function of the inputs (used by gradient
        checks and tests).
        """
        cfg = self.cfg
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) input, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        stride = cfg.backbone.total_stride
        if h % stride or w % stride:
            raise ValueError(f"input dims must be multiples of stride {stride}, got {h}x{w}")
        if phase not in ("rpn", "joint", "infer"):
            raise ValueError(f"bad phase: {phase}")
        training = phase in ("rpn", "joint")
        if training and gt_boxes is None:
            raise ValueError("training phases require ground truth")
        gt_boxes = np.zeros((0, 4)) if gt_boxes is None else np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_classes = np.zeros(0, dtype=np.int64) if gt_classes is None else np.asarray(gt_classes, dtype=np.int64)
        if rng is None:
            rng = np.random.default_rng(0)

        taps = self.backbone(x)
        c4 = taps["conv4_x"]
        source = taps[cfg.backbone.stn_source]
        if record is not None:
            record.update({k_: v for k_, v in taps.items()})

        cls_map, bbox_map = self.rpn(c4)
        fg_probs, rpn_deltas = self.rpn.flatten_outputs(cls_map, bbox_map)
        fh, fw = cls_map.shape[2], cls_map.shape[3]
        anchors = generate_anchors(cfg.anchors, fh, fw)
        if record is not None:
            record["rpn_cls_map"], record["rpn_bbox_map"] = cls_map, bbox_map

        # proposals are constants to the head: decode from detached values
        prop_boxes, prop_scores = propose(
            fg_probs.data,
            rpn_deltas.data,
            anchors,
            (w, h),
            "train" if training else "infer",
            cfg.nms_thresh_train,
            cfg.nms_thresh_infer,
            cfg.max_rois_after_nms,
        )

        rpn_result = None
        if training:
            targets = fixed_rpn_targets
            if targets is None:
                targets = assign_rpn_targets(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
                targets = sample_rpn_targets(targets, cfg.rpn_batch_size, cfg.rpn_pos_fraction, rng)
            rpn_result = rpn_loss(fg_probs, targets, rpn_deltas, cfg.loss)

        if phase == "rpn":
            zero = LossResult(Tensor(np.zeros(())), Tensor(np.zeros(())), Tensor(np.zeros(())))
            bundle = LossBundle(rpn_result, zero, total_loss(rpn_result.total, zero.total))
            return ForwardResult(prop_boxes, prop_scores, np.zeros((0, 4)), None, None, None, None, bundle)

        roi_labels = fixed_roi_labels
        roi_targets = fixed_roi_targets
        if fixed_rois is not None:
            rois = np.asarray(fixed_rois, dtype=np.float64).reshape(-1, 4)
        elif phase == "joint":
            cand_boxes, cand_scores = prop_boxes, prop_scores
            if cfg.append_gt_to_rois and gt_boxes.shape[0]:
                # the exact boxes plus two jittered copies each, so the head
                # also trains on imperfectly aligned positives
                extra = [gt_boxes]
                for _ in range(2):
                    cx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
                    cy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
                    bw = gt_boxes[:, 2] - gt_boxes[:, 0]
                    bh = gt_boxes[:, 3] - gt_boxes[:, 1]
                    cx = cx + rng.uniform(-0.12, 0.12, cx.shape) * bw
                    cy = cy + rng.uniform(-0.12, 0.12, cy.shape) * bh
                    bw = bw * np.exp(rng.uniform(-0.15, 0.15, bw.shape))
                    bh = bh * np.exp(rng.uniform(-0.15, 0.15, bh.shape))
                    jit = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
                    extra.append(clip_boxes(jit, w, h))
                cand_boxes = np.concatenate([prop_boxes] + extra)
                cand_scores = np.concatenate(
                    [prop_scores, np.ones(sum(e.shape[0] for e in extra))]
                )
            rois, roi_labels, roi_targets = select_train_rois(
                cand_boxes,
                cand_scores,
                gt_boxes,
                gt_classes,
                rng,
                cfg.rois_per_image,
                cfg.head_pos_fraction,
                cfg.head_fg_iou,
            )
        else:
            rois = prop_boxes[: cfg.rois_per_image]

        if rois.shape[0] == 0:
            bundle = None
            if training:
                zero = LossResult(Tensor(np.zeros(())), Tensor(np.zeros(())), Tensor(np.zeros(())))
                bundle = LossBundle(rpn_result, zero, total_loss(rpn_result.total, zero.total))
            return ForwardResult(prop_boxes, prop_scores, rois, roi_labels, roi_targets, None, None, bundle)

        roi_rows = np.concatenate([np.zeros((rois.shape[0], 1)), rois], axis=1)
        roi_cfg = self.cfg.roi_align_config()
        score_maps = self.lsc(source)
        f_ps = ps_roi_align(score_maps, roi_rows, roi_cfg, cfg.pooled_size, cfg.num_classes)
        f_st = roi_align(c4, roi_rows, roi_cfg)
        if record is not None:
            record["lsc"], record["f_ps"], record["f_st"] = score_maps, f_ps, f_st
        probs, deltas12, f_rp = self.head(f_ps, f_st, record=record)

        bundle = None
        if training:
            head_result = head_loss(probs, roi_labels, deltas12, roi_targets, cfg.loss)
            bundle = LossBundle(rpn_result, head_result, total_loss(rpn_result.total, head_result.total))
        return ForwardResult(prop_boxes, prop_scores, rois, roi_labels, roi_targets, probs, deltas12, bundle)

    # ------------------------------------------------------------------
    def infer(self, image: Array, score_threshold: float | None = None) -> list[Detection]:
        """Detections on a raw HWC uint8 image: per-class decode, score
        threshold, per-class NMS at the inference threshold."""
        cfg = self.cfg
        thresh = cfg.score_threshold if score_threshold is None else score_threshold
        with T.no_grad():
            res = self.forward(normalize_image(image), phase="infer")
        if res.class_probs is None:
            return []
        h, w = image.shape[0], image.shape[1]
        probs = res.class_probs.data
        deltas = res.box_deltas.data
        dets: list[Detection] = []
        for c in range(1, cfg.num_classes):
            scores = probs[:, c]
            boxes = decode_deltas(deltas[:, 4 * c : 4 * c + 4], res.rois, clip=DELTA_CLIP)
            boxes = clip_boxes(boxes, w, h)
            valid = (scores >= thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            idx = np.flatnonzero(valid)
            if idx.size == 0:
                continue
            keep = nms(boxes[idx], scores[idx], cfg.nms_thresh_infer)
            for i in keep:
                j = idx[i]
                dets.append(Detection(c, float(scores[j]), tuple(float(v) for v in boxes[j])))
        dets.sort(key=lambda d: (-d.score, d.class_id, d.box))
        return dets


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    rpn_epochs: int = 1
    base_lr: float = 0.05
    lr_decay: float = 0.9
    lr_step_epochs: int = 3
    momentum: float = 0.0
    weight_decay: float = 0.0


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.05
    seed: int = 0
    phase: str = "rpn-only"


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


class SGD:
    """Plain SGD; momentum and weight decay default to zero."""

    def __init__(self, params: dict[str, Parameter], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: dict[str, Array] = {}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf.get(name)
                buf = g if buf is None else self.momentum * buf + g
                self._buf[name] = buf
                g = buf
            p.data = p.data - lr * p.lr_mult * g
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


LOG_HEADER = "step,epoch,lr,rpn_cls,rpn_reg,head_cls,head_reg,total"


def train(
    model: Detector,
    dataset: list[tuple[Array, Array, Array]],
    cfg: TrainConfig,
    seed: int = 0,
    force_phase: str | None = None,
) -> list[str]:
    """SGD over (image, gt_boxes, gt_classes) triples; returns CSV log lines.

    The first `rpn_epochs` epochs train the RPN path only, then the whole
    model trains jointly. A non-finite loss aborts with the offending step.
    """
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    rows = [LOG_HEADER]
    state = TrainState(seed=seed)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        phase = "rpn" if epoch < cfg.rpn_epochs else "joint"
        if force_phase is not None:
            phase = force_phase
        state.epoch, state.lr = epoch, lr
        state.phase = "rpn-only" if phase == "rpn" else "joint"
        order = rng.permutation(len(dataset))
        for i in order:
            image, boxes, classes = dataset[i]
            res = model.forward(
                normalize_image(image), boxes, classes, phase=phase, rng=rng
            )
            loss = res.losses.total
            parts = res.losses.parts()
            if not np.isfinite(parts["total"]):
                raise TrainingDiverged(state.step)
            loss.backward()
            opt.step(lr)
            rows.append(
                f"{state.step},{epoch},{lr!r},{parts['rpn_cls']!r},{parts['rpn_reg']!r},"
                f"{parts['head_cls']!r},{parts['head_reg']!r},{parts['total']!r}"
            )
            state.step += 1
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str, model: Detector, cfg_dict: dict) -> None:
    """Write weights as one LRTN file per tensor plus a JSON manifest;
    the directory swap is atomic (write then rename)."""
    parent = os.path.dirname(os.path.abspath(path)) or "."
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        manifest: dict = {"config_hash": config_hash(cfg_dict), "config": cfg_dict, "tensors": {}}
        for name, p in sorted(model.parameters().items()):
            fname = name.replace(".", "__") + ".lrtn"
            T.save_tensor(os.path.join(tmp, fname), p.data)
            manifest["tensors"][name] = {"file": fname, "shape": list(p.shape)}
        with open(os.path.join(tmp, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        if os.path.isdir(path):
            old = tempfile.mkdtemp(prefix=".ckpt-old-", dir=parent)
            os.rename(path, os.path.join(old, "gone"))
        os.rename(tmp, path)
    finally:
        if os.path.isdir(tmp):
            import shutil

            shutil.rmtree(tmp, ignore_errors=True)


def load_checkpoint(path: str, model: Detector) -> dict:
    """Load weights into the model; returns the manifest."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    params = model.parameters()
    missing = set(params) - set(manifest["tensors"])
    extra = set(manifest["tensors"]) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, meta in manifest["tensors"].items():
        arr = T.load_tensor(os.path.join(path, meta["file"]))
        if tuple(arr.shape) != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
        params[name].data = arr
    return manifest


# ---------------------------------------------------------------------------
# tiled inference for oversized images


def infer_tiled(
    model: Detector,
    image: Array,
    tile_size: int,
    overlap: int,
    score_threshold: float | None = None,
) -> list[Detection]:
    """Run inference per tile and merge with cross-tile per-class NMS at the
    inference threshold, in global coordinates."""
    from .data import tile_image  # local import to avoid a module cycle

    tiles = tile_image(image, [], tile_size=tile_size, overlap=overlap)
    all_dets: list[Detection] = []
    for t in tiles:
        for d in model.infer(t.image, score_threshold):
            x1, y1, x2, y2 = d.box
            all_dets.append(Detection(d.class_id, d.score, (x1 + t.ox, y1 + t.oy, x2 + t.ox, y2 + t.oy)))
    merged: list[Detection] = []
    for c in sorted({d.class_id for d in all_dets}):
        group = [d for d in all_dets if d.class_id == c]
        boxes = np.array([d.box for d in group])
        scores = np.array([d.score for d in group])
        keep = nms(boxes, scores, model.cfg.nms_thresh_infer)
        merged.extend(group[i] for i in keep)
    merged.sort(key=lambda d: (-d.score, d.class_id, d.box))
    return merged


# ---------------------------------------------------------------------------
# architecture table report


def shape_report(model: Detector, image_shape: tuple[int, int, int, int]) -> list[tuple[str, str, str]]:
    """Forward a random image, returning (row, input shape, output shape)
    strings for every architecture-table row."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal(image_shape)
    record: dict = {}
    with T.no_grad():
        res = model.forward(x, phase="infer", record=record)

    def s(shape) -> str:
        return " x ".join(str(int(v)) for v in shape)

    n3hw = s(image_shape)
    r = record
    rois_shape = (res.rois.shape[0], 5)
    rows = [
        ("conv1", n3hw, s(r["conv1"].shape)),
        ("conv2_x", s(r["conv1"].shape), s(r["conv2_x"].shape)),
        ("conv3_x", s(r["conv2_x"].shape), s(r["conv3_x"].shape)),
        ("conv4_x", s(r["conv3_x"].shape), s(r["conv4_x"].shape)),
        ("conv5_x", s(r["f_rp"].shape), s(r["pooled"].shape)),
        ("rpn", s(r["conv4_x"].shape), s(rois_shape)),
        ("lsc", s(r[model.cfg.backbone.stn_source].shape), s(r["lsc"].shape)),
        ("roi_align", f"{s(r['conv4_x'].shape)} + {s(rois_shape)}", s(r["f_st"].shape)),
        ("ps_roi_align", f"{s(r['lsc'].shape)} + {s(rois_shape)}", s(r["f_ps"].shape)),
        ("localization", s(r["f_ps"].shape), s((r["theta"].shape[0], 6))),
        ("grid_generator", s(r["theta"].shape), s(r["grid"].shape)),
        ("sampler", f"{s(r['f_st'].shape)} + {s(r['grid'].shape)}", s(r["f_rp"].shape)),
        ("fc_cls", s(r["pooled"].shape), s(r["probs"].shape)),
        ("fc_bbox", s(r["pooled"].shape), s(r["deltas12"].shape)),
    ]
    return rows
