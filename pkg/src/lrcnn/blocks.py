"""Composite layers: backbone bottleneck stages and the large separable convolution.

The backbone follows the residual-network stage layout with two taps of equal
spatial resolution (the third stage keeps stride 2, the fourth runs at stride
1) so the same RoIs can pool from both. Normalization layers are plain
per-channel affine transforms (no batch statistics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter container; children discovered via attributes."""

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, v in vars(self).items():
            if isinstance(v, Parameter):
                out[name] = v
            elif isinstance(v, Module):
                for k, p in v.parameters().items():
                    out[f"{name}.{k}"] = p
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        for k, p in item.parameters().items():
                            out[f"{name}.{i}.{k}"] = p
        return out


def kaiming_conv(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Fan-in scaled normal init for conv weights (O, C, Kh, Kw)."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def kaiming_linear(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in))


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int | tuple[int, int],
        stride: int | tuple[int, int] = 1,
        padding: int | tuple[int, int] = 0,
        bias: bool = False,
    ):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        self.weight = Parameter(kaiming_conv(rng, (out_ch, in_ch, kh, kw)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class NormAffine(Module):
    """Frozen-statistics normalization: per-channel scale and shift only."""

    def __init__(self, channels: int):
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_affine(x, self.scale, self.shift)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_f: int, out_f: int):
        self.weight = Parameter(kaiming_linear(rng, out_f, in_f))
        self.bias = Parameter(np.zeros(out_f))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BottleneckBlock(Module):
    """1x1 -> 3x3 -> 1x1 residual block; out channels = 4 * mid channels."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        mid_ch: int,
        stride: int = 1,
        residual_scale: float = 1.0,
    ):
        out_ch = 4 * mid_ch
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.conv1 = Conv2d(rng, in_ch, mid_ch, 1)
        self.norm1 = NormAffine(mid_ch)
        self.conv2 = Conv2d(rng, mid_ch, mid_ch, 3, stride=stride, padding=1)
        self.norm2 = NormAffine(mid_ch)
        self.conv3 = Conv2d(rng, mid_ch, out_ch, 1)
        self.norm3 = NormAffine(out_ch)
        # without batch statistics a unit scale here doubles activation
        # variance per block and deep stacks overflow; 1/sqrt(depth) keeps
        # total growth near e while leaving the main path trainable
        self.norm3.scale = Parameter(np.full(out_ch, residual_scale))
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=stride)
            self.proj_norm = NormAffine(out_ch)
        else:
            self.proj = None
            self.proj_norm = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"bottleneck expects {self.in_channels} channels, got {x.shape[1]}")
        h = T.relu(self.norm1(self.conv1(x)))
        h = T.relu(self.norm2(self.conv2(h)))
        h = self.norm3(self.conv3(h))
        skip = self.proj_norm(self.proj(x)) if self.proj is not None else x
        return T.relu(T.add(h, skip))


@dataclass(frozen=True)
class StageSpec:
    mid_channels: int
    blocks: int
    stride: int


@dataclass(frozen=True)
class BackboneConfig:
    """Stage widths/depths for the five convolutional stages plus the tap
    feeding the localization path."""

    conv1_out: int
    stage2: StageSpec
    stage3: StageSpec
    stage4: StageSpec
    stage5: StageSpec
    stn_source: str = "conv3_x"

    def __post_init__(self):
        if self.stn_source not in ("conv3_x", "conv4_x"):
            raise ValueError(f"bad stn_source: {self.stn_source}")
        if self.stage4.stride != 1:
            raise ValueError("stage4 stride must be 1 so both taps share a resolution")

    @property
    def conv3_out(self) -> int:
        return 4 * self.stage3.mid_channels

    @property
    def conv4_out(self) -> int:
        return 4 * self.stage4.mid_channels

    @property
    def conv5_out(self) -> int:
        return 4 * self.stage5.mid_channels

    @property
    def stn_source_out(self) -> int:
        return self.conv3_out if self.stn_source == "conv3_x" else self.conv4_out

    @property
    def total_stride(self) -> int:
        # conv1 (2) * maxpool (2) * stage strides before the taps
        return 4 * self.stage2.stride * self.stage3.stride * self.stage4.stride

    @property
    def residual_scale(self) -> float:
        n = self.stage2.blocks + self.stage3.blocks + self.stage4.blocks + self.stage5.blocks
        return 1.0 / np.sqrt(max(1, n))

    @staticmethod
    def paper(stn_source: str = "conv3_x") -> "BackboneConfig":
        return BackboneConfig(
            conv1_out=64,
            stage2=StageSpec(64, 3, 1),
            stage3=StageSpec(128, 4, 2),
            stage4=StageSpec(256, 23, 1),
            stage5=StageSpec(512, 3, 2),
            stn_source=stn_source,
        )

    @staticmethod
    def toy(stn_source: str = "conv3_x") -> "BackboneConfig":
        return BackboneConfig(
            conv1_out=16,
            stage2=StageSpec(4, 1, 1),
            stage3=StageSpec(8, 1, 2),
            stage4=StageSpec(16, 1, 1),
            stage5=StageSpec(32, 1, 2),
            stn_source=stn_source,
        )


def _make_stage(rng, in_ch: int, spec: StageSpec, residual_scale: float = 1.0) -> list[BottleneckBlock]:
    blocks = [BottleneckBlock(rng, in_ch, spec.mid_channels, spec.stride, residual_scale)]
    for _ in range(spec.blocks - 1):
        blocks.append(
            BottleneckBlock(rng, 4 * spec.mid_channels, spec.mid_channels, 1, residual_scale)
        )
    return blocks


class Backbone(Module):
    """Stages conv1 through conv4; the fifth stage lives in the RoI head."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.cfg = cfg
        rs = cfg.residual_scale
        self.conv1 = Conv2d(rng, 3, cfg.conv1_out, 7, stride=2, padding=3)
        self.norm1 = NormAffine(cfg.conv1_out)
        self.stage2 = _make_stage(rng, cfg.conv1_out, cfg.stage2, rs)
        self.stage3 = _make_stage(rng, 4 * cfg.stage2.mid_channels, cfg.stage3, rs)
        self.stage4 = _make_stage(rng, 4 * cfg.stage3.mid_channels, cfg.stage4, rs)

    def __call__(self, x: Tensor) -> dict[str, Tensor]:
        taps: dict[str, Tensor] = {}
        h = T.relu(self.norm1(self.conv1(x)))
        taps["conv1"] = h
        # declared pool triple (3,2,0) cannot reach the declared output size;
        # padding 1 honors the stated shapes
        h = T.maxpool2d(h, 3, 2, 1)
        for blk in self.stage2:
            h = blk(h)
        taps["conv2_x"] = h
        for blk in self.stage3:
            h = blk(h)
        taps["conv3_x"] = h
        for blk in self.stage4:
            h = blk(h)
        taps["conv4_x"] = h
        return taps


class LscBlock(Module):
    """Two-branch large separable convolution compressing to k^2 * C channels.

    Branch A applies a (k,1) then (1,k) conv; branch B the transpose order;
    outputs are summed. Padding preserves spatial dims.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int = 512,
        mid_ch: int = 256,
        out_ch: int = 147,
        kernel: int = 15,
    ):
        p = kernel // 2
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.a1 = Conv2d(rng, in_ch, mid_ch, (kernel, 1), 1, (p, 0))
        self.a2 = Conv2d(rng, mid_ch, out_ch, (1, kernel), 1, (0, p))
        self.b1 = Conv2d(rng, in_ch, mid_ch, (1, kernel), 1, (0, p))
        self.b2 = Conv2d(rng, mid_ch, out_ch, (kernel, 1), 1, (p, 0))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"lsc expects {self.in_channels} channels, got {x.shape[1]}")
        return T.add(self.a2(self.a1(x)), self.b2(self.b1(x)))
