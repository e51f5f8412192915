"""Bottleneck adapters for the encoder blocks and the depth decoder.

An adapter is down-projector -> GELU -> up-projector running in parallel with
its frozen host (the host's residual sum provides the skip). The up projector
starts at exactly zero, so an adapted network is a bitwise no-op relative to
its base network at initialization; the down projector gets a small seeded
random init so both projectors can actually train (a both-zero init is a
saddle point that pins the down weights at zero forever).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .modules import BatchNorm2d, Conv2d, Module, Parameter
from .nnops import upsample_bilinear
from .tensor import Tensor, concat, gelu

ATTACH_KINDS = ("replk_block", "convffn")
BN_DESIGNS = ("a", "b", "d")  # a: private prefix BN, b: none, d: share host BN


@dataclass(frozen=True)
class AdapterConfig:
    ratio: float = 0.25
    down_projector: str = "conv3x3"  # for replk_block adapters; convffn always linear
    up_projector: str = "linear"
    attach_to: frozenset = frozenset(ATTACH_KINDS)
    bn_design: str = "a"
    decoder_input_scales: tuple = (0, 3)

    def __post_init__(self):
        if not (0 < self.ratio <= 1):
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.down_projector not in ("conv3x3", "linear"):
            raise ValueError(f"bad down_projector {self.down_projector!r}")
        if self.up_projector not in ("conv3x3", "linear"):
            raise ValueError(f"bad up_projector {self.up_projector!r}")
        object.__setattr__(self, "attach_to", frozenset(self.attach_to))
        if not self.attach_to <= set(ATTACH_KINDS):
            raise ValueError(f"attach_to must be a subset of {ATTACH_KINDS}")
        if self.bn_design not in BN_DESIGNS:
            raise ValueError(f"bn_design must be one of {BN_DESIGNS}")
        scales = tuple(sorted(self.decoder_input_scales))
        if not scales or not set(scales) <= {0, 1, 2, 3}:
            raise ValueError("decoder_input_scales must be a non-empty subset of {0,1,2,3}")
        object.__setattr__(self, "decoder_input_scales", scales)

    def mid_channels(self, c: int) -> int:
        return max(1, math.ceil(self.ratio * c))


class EncoderAdapter(Module):
    """Parallel bottleneck for one encoder block.

    The host passes both its raw input and its normalized input; which one the
    adapter consumes depends on bn_design (a: own BN over raw input, b: raw
    input, d: the host's normalized input).
    """

    def __init__(self, channels: int, config: AdapterConfig, kind: str, dtype=np.float32):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        if kind not in ATTACH_KINDS:
            raise ValueError(f"unknown host kind {kind!r}")
        self.bn_design = config.bn_design
        mid = config.mid_channels(channels)
        down_kind = config.down_projector if kind == "replk_block" else "linear"
        up_kind = config.up_projector if kind == "replk_block" else "linear"
        self.bn = BatchNorm2d(channels, dtype=dtype) if config.bn_design == "a" else None
        self.down = Conv2d(channels, mid, 3 if down_kind == "conv3x3" else 1, dtype=dtype)
        self.up = Conv2d(mid, channels, 3 if up_kind == "conv3x3" else 1, init="zeros", dtype=dtype)

    def forward(self, x_raw: Tensor, x_host_norm: Tensor) -> Tensor:
        if self.bn_design == "a":
            h = self.bn.forward(x_raw)
        elif self.bn_design == "b":
            h = x_raw
        else:
            h = x_host_norm
        return self.up.forward(gelu(self.down.forward(h)))


def make_encoder_adapter(channels: int, config: AdapterConfig,
                         kind: str = "replk_block", dtype=np.float32) -> EncoderAdapter:
    return EncoderAdapter(channels, config, kind, dtype)


class DecoderAdapter(Module):
    """Logit-level bottleneck fed by selected pyramid scales.

    Selected features are upsampled to the 1/4-scale grid, concatenated, and
    projected 1x1 -> GELU -> 1x1 down to a single channel; the result is
    bilinearly restored to full image resolution and added to the decoder's
    pre-sigmoid disparity logits. The bottleneck width follows the deepest
    selected scale's channel count.
    """

    def __init__(self, pyramid_channels, config: AdapterConfig, dtype=np.float32):
        super().__init__()
        scales = config.decoder_input_scales
        self.scales = scales
        cin = sum(pyramid_channels[s] for s in scales)
        mid = config.mid_channels(pyramid_channels[max(scales)])
        self.down = Conv2d(cin, mid, 1, dtype=dtype)
        self.up = Conv2d(mid, 1, 1, init="zeros", dtype=dtype)

    def forward(self, pyramid, out_h: int, out_w: int) -> Tensor:
        h0, w0 = pyramid[0].shape[2], pyramid[0].shape[3]
        feats = []
        for s in self.scales:
            f = pyramid[s]
            if f.shape[2] != h0 or f.shape[3] != w0:
                f = upsample_bilinear(f, h0, w0)
            feats.append(f)
        x = feats[0] if len(feats) == 1 else concat(feats, 1)
        delta = self.up.forward(gelu(self.down.forward(x)))
        return upsample_bilinear(delta, out_h, out_w)


def make_decoder_adapter(pyramid_channels, config: AdapterConfig, dtype=np.float32) -> DecoderAdapter:
    return DecoderAdapter(pyramid_channels, config, dtype)


def count_params(target, trainable_only: bool = True) -> int:
    """Exact parameter count; `target` is a Module or an iterable of Parameters."""
    if isinstance(target, Module):
        params = (p for _, p in target.named_parameters())
    else:
        params = iter(target)
    return sum(p.tensor.size for p in params
               if isinstance(p, Parameter) and (p.trainable or not trainable_only))
