"""The resampling head: localization network, grid resampler, and the
per-RoI classification/regression stack.

The localization network regresses a 2x3 affine transform from the
position-sensitive pooled feature; the standard pooled feature is then
resampled through the transform's grid, letting the deep pooled
representation recover spatial detail from the shallower tap. At
initialization the transform is the identity, so the whole head is
transparent to the resampling step.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import BottleneckBlock, Linear, Module, StageSpec
from .roi_ops import affine_grid, grid_sample
from .tensor import Parameter, Tensor


class StnHead(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        pooled_channels: int,
        pooled_size: int,
        num_classes: int,
        conv5_in: int,
        conv5: StageSpec,
        residual_scale: float = 1.0,
        loc_lr_mult: float = 0.1,
    ):
        self.num_classes = num_classes
        self.loc_in = pooled_channels * pooled_size * pooled_size
        # the localization layers learn at a reduced rate; large steps on the
        # transform collapse the resampling grid early in training
        self.loc_fc1 = Linear(rng, self.loc_in, 64)
        self.loc_fc1.weight.lr_mult = loc_lr_mult
        self.loc_fc1.bias.lr_mult = loc_lr_mult
        # identity transform at init: zero weights, bias = flattened [[1,0,0],[0,1,0]]
        self.loc_fc2 = Linear(rng, 64, 6)
        self.loc_fc2.weight = Parameter(np.zeros((6, 64)), lr_mult=loc_lr_mult)
        self.loc_fc2.bias = Parameter(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), lr_mult=loc_lr_mult)
        blocks = [BottleneckBlock(rng, conv5_in, conv5.mid_channels, conv5.stride, residual_scale)]
        for _ in range(conv5.blocks - 1):
            blocks.append(
                BottleneckBlock(rng, 4 * conv5.mid_channels, conv5.mid_channels, 1, residual_scale)
            )
        self.conv5 = blocks
        feat = 4 * conv5.mid_channels
        self.fc_cls = Linear(rng, feat, num_classes)
        self.fc_bbox = Linear(rng, feat, 4 * num_classes)

    def localize(self, f_ps: Tensor) -> Tensor:
        """Pooled feature (R,C,P,P) -> per-RoI affine params (R,2,3)."""
        r = f_ps.shape[0]
        flat = T.reshape(f_ps, (r, self.loc_in))
        theta = self.loc_fc2(T.relu(self.loc_fc1(flat)))
        return T.reshape(theta, (r, 2, 3))

    def resample(self, f_ps: Tensor, f_st: Tensor, record: dict | None = None) -> Tensor:
        """Resample the standard pooled feature through the regressed grid."""
        if f_ps.shape[0] != f_st.shape[0]:
            raise ValueError("pooled features must have matching RoI counts")
        theta = self.localize(f_ps)
        grid = affine_grid(theta, f_st.shape)
        f_rp = grid_sample(f_st, grid)
        if record is not None:
            record["theta"], record["grid"], record["f_rp"] = theta, grid, f_rp
        return f_rp

    def classify_regress(self, f_rp: Tensor, record: dict | None = None) -> tuple[Tensor, Tensor]:
        """Per-RoI conv stack + global average pool + twin FC heads.

        Returns (class probabilities (R,num_classes), box deltas (R,4*num_classes)).
        """
        h = f_rp
        for blk in self.conv5:
            h = blk(h)
        pooled = T.global_avg_pool(h)
        probs = T.softmax(self.fc_cls(pooled))
        deltas = self.fc_bbox(pooled)
        if record is not None:
            record["pooled"], record["probs"], record["deltas12"] = pooled, probs, deltas
        return probs, deltas

    def __call__(
        self, f_ps: Tensor, f_st: Tensor, record: dict | None = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        f_rp = self.resample(f_ps, f_st, record=record)
        probs, deltas = self.classify_regress(f_rp, record=record)
        return probs, deltas, f_rp
