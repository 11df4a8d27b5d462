"""Residual video backbone: a 2D encoder and its inflated 3D twin.

The 3D network is never trained from scratch here. It is built by lifting a
2D encoder's kernels: the first 1x1 convolution of every inflate_every-th
residual block becomes a t x 1 x 1 temporal kernel carrying the 2D weights
divided by t, and every other kernel becomes 1 x k x k with weights copied
verbatim. On a temporally constant clip (with replicate or circular temporal
padding) the inflated network reproduces the 2D network frame for frame,
which is the bootstrap property the tests pin down.

The two module trees use identical attribute names, so the weight transfer
is a plain state-dict walk with per-kernel reshaping.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .seeding import derive_seed, torch_seeded

PAD_MODES = ("zeros", "replicate", "circular")


@dataclass(frozen=True)
class EncoderConfig:
    stage_widths: tuple = (16, 32)
    blocks_per_stage: tuple = (2, 2)
    stage_strides: tuple = (2, 2)
    stem_width: int = 8
    stem_stride: int = 2
    in_channels: int = 3
    bn_eps: float = 1e-5

    def validate(self):
        n = len(self.stage_widths)
        if n == 0:
            raise ValueError("need at least one stage")
        if len(self.blocks_per_stage) != n or len(self.stage_strides) != n:
            raise ValueError("stage_widths, blocks_per_stage, stage_strides must align")
        if any(w < 1 for w in self.stage_widths) or any(
            b < 1 for b in self.blocks_per_stage
        ):
            raise ValueError("stage widths and block counts must be positive")
        if self.stem_width < 1 or self.in_channels < 1:
            raise ValueError("stem_width and in_channels must be positive")
        if self.stem_stride < 1 or any(s < 1 for s in self.stage_strides):
            raise ValueError("strides must be positive")

    @property
    def out_channels(self):
        return self.stage_widths[-1]

    @property
    def total_stride(self):
        return self.stem_stride * int(np.prod(self.stage_strides))

    def to_dict(self):
        return {
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": list(self.blocks_per_stage),
            "stage_strides": list(self.stage_strides),
            "stem_width": self.stem_width,
            "stem_stride": self.stem_stride,
            "in_channels": self.in_channels,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("stage_widths", "blocks_per_stage", "stage_strides"):
            d[key] = tuple(d[key])
        return cls(**d)


TARGET_KERNELS = ("first_in_block",)


@dataclass(frozen=True)
class InflationSpec:
    temporal_extent: int = 3
    inflate_every: int = 2
    temporal_pad: str = "replicate"
    target_kernel: str = "first_in_block"

    def validate(self):
        if self.temporal_extent < 1 or self.temporal_extent % 2 == 0:
            raise ValueError("temporal_extent must be a positive odd integer")
        if self.inflate_every < 1:
            raise ValueError("inflate_every must be positive")
        if self.normalized_pad not in PAD_MODES:
            raise ValueError(f"temporal_pad must be one of {PAD_MODES}")
        if self.target_kernel not in TARGET_KERNELS:
            raise ValueError(f"target_kernel must be one of {TARGET_KERNELS}")

    @property
    def normalized_pad(self):
        return "zeros" if self.temporal_pad == "zero" else self.temporal_pad

    def to_dict(self):
        return {
            "temporal_extent": self.temporal_extent,
            "inflate_every": self.inflate_every,
            "temporal_pad": self.temporal_pad,
            "target_kernel": self.target_kernel,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.setdefault("target_kernel", "first_in_block")
        return cls(**d)


def _inner_width(width):
    return max(1, width // 4)


class Bottleneck2D(nn.Module):
    def __init__(self, in_ch, width, stride, bn_eps):
        super().__init__()
        inner = _inner_width(width)
        self.conv1 = nn.Conv2d(in_ch, inner, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(inner, eps=bn_eps)
        self.conv2 = nn.Conv2d(inner, inner, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(inner, eps=bn_eps)
        self.conv3 = nn.Conv2d(inner, width, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(width, eps=bn_eps)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != width:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, width, 1, stride=stride, bias=False),
                nn.BatchNorm2d(width, eps=bn_eps),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        h = self.relu(self.bn1(self.conv1(x)))
        h = self.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return self.relu(h + identity)


class Bottleneck3D(nn.Module):
    def __init__(self, in_ch, width, stride, bn_eps, temporal_extent, pad_mode):
        super().__init__()
        inner = _inner_width(width)
        t = temporal_extent
        self.temporal_extent = t
        self.conv1 = nn.Conv3d(
            in_ch,
            inner,
            (t, 1, 1),
            padding=(t // 2, 0, 0),
            padding_mode=pad_mode if t > 1 else "zeros",
            bias=False,
        )
        self.bn1 = nn.BatchNorm3d(inner, eps=bn_eps)
        self.conv2 = nn.Conv3d(
            inner,
            inner,
            (1, 3, 3),
            stride=(1, stride, stride),
            padding=(0, 1, 1),
            bias=False,
        )
        self.bn2 = nn.BatchNorm3d(inner, eps=bn_eps)
        self.conv3 = nn.Conv3d(inner, width, (1, 1, 1), bias=False)
        self.bn3 = nn.BatchNorm3d(width, eps=bn_eps)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != width:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, width, 1, stride=(1, stride, stride), bias=False),
                nn.BatchNorm3d(width, eps=bn_eps),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        h = self.relu(self.bn1(self.conv1(x)))
        h = self.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return self.relu(h + identity)


class ResidualEncoder2D(nn.Module):
    """Stem plus bottleneck stages, frame in, feature map out."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(
                config.in_channels,
                config.stem_width,
                3,
                stride=config.stem_stride,
                padding=1,
                bias=False,
            ),
            nn.BatchNorm2d(config.stem_width, eps=config.bn_eps),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = config.stem_width
        for width, nblocks, stride in zip(
            config.stage_widths, config.blocks_per_stage, config.stage_strides
        ):
            blocks = []
            for b in range(nblocks):
                blocks.append(
                    Bottleneck2D(in_ch, width, stride if b == 0 else 1, config.bn_eps)
                )
                in_ch = width
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self):
        return self.config.out_channels

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return h


class ResidualEncoder3D(nn.Module):
    """The inflated twin of ResidualEncoder2D; clip in, space-time features out."""

    def __init__(self, config, inflation):
        super().__init__()
        config.validate()
        inflation.validate()
        self.config = config
        self.inflation = inflation
        pad_mode = inflation.normalized_pad
        self.stem = nn.Sequential(
            nn.Conv3d(
                config.in_channels,
                config.stem_width,
                (1, 3, 3),
                stride=(1, config.stem_stride, config.stem_stride),
                padding=(0, 1, 1),
                bias=False,
            ),
            nn.BatchNorm3d(config.stem_width, eps=config.bn_eps),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = config.stem_width
        index = 0
        self._inflated_indices = []
        for width, nblocks, stride in zip(
            config.stage_widths, config.blocks_per_stage, config.stage_strides
        ):
            blocks = []
            for b in range(nblocks):
                t = 1
                if index % inflation.inflate_every == 0:
                    t = inflation.temporal_extent
                    self._inflated_indices.append(index)
                blocks.append(
                    Bottleneck3D(
                        in_ch,
                        width,
                        stride if b == 0 else 1,
                        config.bn_eps,
                        t,
                        pad_mode,
                    )
                )
                in_ch = width
                index += 1
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self):
        return self.config.out_channels

    @property
    def min_clip_len(self):
        if self._inflated_indices:
            return self.inflation.temporal_extent
        return 1

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def forward(self, x, stage_hook=None):
        h = self.stem(x)
        for i, stage in enumerate(self.stages):
            for block in stage:
                h = block(h)
            if stage_hook is not None:
                h = stage_hook(i, h)
        return h


def build_encoder_2d(config=None, seed=0):
    """Construct a 2D encoder with a seed-determined initialization."""
    config = config if config is not None else EncoderConfig()
    config.validate()
    with torch_seeded(derive_seed(seed, "encoder2d")):
        return ResidualEncoder2D(config)


def inflate(net2d, inflation=None):
    """Lift a 2D encoder into a 3D one, bootstrapping every weight.

    Kernels gaining a temporal extent t carry the 2D weights divided by t
    replicated across time; all others are the 2D weights under a singleton
    time axis. Batch norm parameters and running statistics copy over
    unchanged. Every 2D parameter maps to exactly one 3D parameter.
    """
    inflation = inflation if inflation is not None else InflationSpec()
    inflation.validate()
    with torch_seeded(0):  # weights are overwritten below; seed only pins buffers
        net3d = ResidualEncoder3D(net2d.config, inflation)
    src = net2d.state_dict()
    dst = net3d.state_dict()
    if set(src) != set(dst):
        raise ValueError("2D and 3D encoders disagree on parameter names")
    mapped = {}
    for name, w2 in src.items():
        target = dst[name]
        if w2.ndim == 4:  # conv kernel (out, in, kh, kw) -> (out, in, kt, kh, kw)
            kt = target.shape[2]
            w3 = w2.unsqueeze(2)
            if kt > 1:
                w3 = w3.repeat(1, 1, kt, 1, 1) / kt
            if w3.shape != target.shape:
                raise ValueError(f"kernel shape mismatch at {name}")
            mapped[name] = w3
        else:
            if w2.shape != target.shape:
                raise ValueError(f"shape mismatch at {name}")
            mapped[name] = w2.clone()
    net3d.load_state_dict(mapped)
    return net3d


def forward_stream(net3d, clip):
    """Run one clip through an inflated encoder, deterministically.

    clip is (T, H, W, 3), uint8 or float in [0, 1]. Returns a detached
    (T, H', W', C) float32 tensor. The network is evaluated in eval mode and
    restored afterwards.
    """
    arr = np.asarray(clip)
    if arr.ndim != 4 or arr.shape[-1] != net3d.config.in_channels:
        raise ValueError(f"expected (T, H, W, {net3d.config.in_channels}) clip")
    if arr.shape[0] < net3d.min_clip_len:
        raise ValueError(
            f"clip shorter than temporal receptive field: {arr.shape[0]} frames, "
            f"need at least {net3d.min_clip_len}"
        )
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    x = x.permute(3, 0, 1, 2)[None]  # (1, C, T, H, W)
    was_training = net3d.training
    net3d.eval()
    try:
        with torch.no_grad():
            y = net3d(x)
    finally:
        if was_training:
            net3d.train()
    return y[0].permute(1, 2, 3, 0).contiguous()


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def inflation_extra_parameters(net2d, inflation):
    """Parameters the 3D network adds: (t - 1) copies of each inflated kernel."""
    inflation.validate()
    t = inflation.temporal_extent
    extra = 0
    for index, block in enumerate(net2d.blocks()):
        if index % inflation.inflate_every == 0:
            extra += (t - 1) * block.conv1.weight.numel()
    return extra
