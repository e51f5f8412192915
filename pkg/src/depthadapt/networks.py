"""Staged large-kernel encoder, U-Net depth decoder, pose network, and the
teacher / student forward graphs.

The encoder stem downsamples x4, each stage transition another x2, giving a
four-level pyramid at 1/4, 1/8, 1/16, 1/32 of the input. Each stage interleaves
a large-kernel residual block (1x1 -> depthwise kxk -> GELU -> 1x1) with a
pointwise FFN block; both follow prefix-BN residual form

    x' = x + M(N(x)) + A(...)

where A is an optional zero-initialized adapter. The student intercepts the
1/4-scale features of two frames, builds a plane-sweep cost volume, compresses
it with a 3x3 reduce conv, and runs the remaining stages on the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import AdapterConfig, DecoderAdapter, EncoderAdapter
from .geometry import DepthBins, build_cost_volume, build_depth_bins
from .modules import Conv2d, ConvBNAct, Linear, Module, ModuleList, BatchNorm2d
from .tensor import Tensor, concat, gelu, sigmoid

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    large_kernel: int = 7

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("need exactly 4 stages")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage widths and depths must be positive")
        if self.large_kernel % 2 != 1:
            raise ValueError("large_kernel must be odd")


class RepLKBlock(Module):
    """Residual large-kernel block: 1x1 -> depthwise kxk -> GELU -> 1x1."""

    def __init__(self, c: int, kernel: int, adapter_cfg: AdapterConfig | None, dtype=np.float32):
        super().__init__()
        self.bn = BatchNorm2d(c, dtype=dtype)
        self.pw1 = Conv2d(c, c, 1, dtype=dtype)
        self.dw = Conv2d(c, c, kernel, groups=c, dtype=dtype)
        self.pw2 = Conv2d(c, c, 1, dtype=dtype)
        self.adapter = None
        if adapter_cfg is not None and "replk_block" in adapter_cfg.attach_to:
            self.adapter = EncoderAdapter(c, adapter_cfg, "replk_block", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n = self.bn.forward(x)
        m = self.pw2.forward(gelu(self.dw.forward(self.pw1.forward(n))))
        out = T.add(x, m)
        if self.adapter is not None:
            out = T.add(out, self.adapter.forward(x, n))
        return out


class ConvFFN(Module):
    """Residual pointwise FFN: 1x1 (expand x2) -> GELU -> 1x1."""

    def __init__(self, c: int, adapter_cfg: AdapterConfig | None, dtype=np.float32):
        super().__init__()
        self.bn = BatchNorm2d(c, dtype=dtype)
        self.fc1 = Conv2d(c, 2 * c, 1, dtype=dtype)
        self.fc2 = Conv2d(2 * c, c, 1, dtype=dtype)
        self.adapter = None
        if adapter_cfg is not None and "convffn" in adapter_cfg.attach_to:
            self.adapter = EncoderAdapter(c, adapter_cfg, "convffn", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n = self.bn.forward(x)
        m = self.fc2.forward(gelu(self.fc1.forward(n)))
        out = T.add(x, m)
        if self.adapter is not None:
            out = T.add(out, self.adapter.forward(x, n))
        return out


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, adapter_cfg: AdapterConfig | None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem1 = ConvBNAct(3, c[0], 3, stride=2, dtype=dtype)
        self.stem2 = ConvBNAct(c[0], c[0], 3, stride=2, dtype=dtype)
        stages = []
        for i in range(4):
            blocks = ModuleList()
            for _ in range(cfg.blocks_per_stage[i]):
                blocks.append(RepLKBlock(c[i], cfg.large_kernel, adapter_cfg, dtype=dtype))
                blocks.append(ConvFFN(c[i], adapter_cfg, dtype=dtype))
            stages.append(blocks)
        self.stages = ModuleList(stages)
        self.trans = ModuleList([ConvBNAct(c[i], c[i + 1], 3, stride=2, dtype=dtype)
                                 for i in range(3)])

    def _check_input(self, x: Tensor) -> None:
        H, W = x.shape[2], x.shape[3]
        if H % 32 or W % 32:
            raise ValueError(f"input dims must be divisible by 32, got {H}x{W}")

    def forward_stage1(self, image: Tensor) -> Tensor:
        """Stem plus stage 1 only: the student's interception point."""
        self._check_input(image)
        x = self.stem2.forward(self.stem1.forward(image))
        for blk in self.stages[0]:
            x = blk.forward(x)
        return x

    def forward_rest(self, f0: Tensor):
        feats = [f0]
        x = f0
        for i in range(3):
            x = self.trans[i].forward(x)
            for blk in self.stages[i + 1]:
                x = blk.forward(x)
            feats.append(x)
        return feats

    def forward(self, image: Tensor):
        """Full pyramid [f0, f1, f2, f3] at 1/4 ... 1/32 scale."""
        return self.forward_rest(self.forward_stage1(image))


class DepthDecoder(Module):
    """U-Net decoder with skip connections; emits one full-resolution
    disparity-logit map. The optional adapter's delta is added to the
    pre-sigmoid logits."""

    def __init__(self, enc_channels, adapter: DecoderAdapter | None = None, dtype=np.float32):
        super().__init__()
        c0, c1, c2, c3 = enc_channels
        self.conv_top = Conv2d(c3, 64, 3, dtype=dtype)
        self.skip2 = Conv2d(64 + c2, 32, 3, dtype=dtype)
        self.skip1 = Conv2d(32 + c1, 16, 3, dtype=dtype)
        self.skip0 = Conv2d(16 + c0, 16, 3, dtype=dtype)
        self.post1 = Conv2d(16, 16, 3, dtype=dtype)
        self.post2 = Conv2d(16, 8, 3, dtype=dtype)
        # bias -3: initial depth ~2m, so the free depth/pose scale can settle
        # without crushing near structure against the d_min floor
        self.head = Conv2d(8, 1, 3, bias_init=-3.0, dtype=dtype)
        self.adapter = adapter

    def forward(self, pyramid) -> Tensor:
        from .nnops import upsample_bilinear

        f0, f1, f2, f3 = pyramid
        h0, w0 = f0.shape[2], f0.shape[3]
        H, W = h0 * 4, w0 * 4
        x = gelu(self.conv_top.forward(f3))
        x = upsample_bilinear(x, f2.shape[2], f2.shape[3])
        x = gelu(self.skip2.forward(concat([x, f2], 1)))
        x = upsample_bilinear(x, f1.shape[2], f1.shape[3])
        x = gelu(self.skip1.forward(concat([x, f1], 1)))
        x = upsample_bilinear(x, h0, w0)
        x = gelu(self.skip0.forward(concat([x, f0], 1)))
        x = upsample_bilinear(x, H // 2, W // 2)
        x = gelu(self.post1.forward(x))
        x = gelu(self.post2.forward(x))  # still at 1/2: full-res convs are the cost hot spot
        x = upsample_bilinear(x, H, W)
        logits = self.head.forward(x)
        if self.adapter is not None:
            logits = T.add(logits, self.adapter.forward(pyramid, H, W))
        return logits


def disparity_to_depth(logits: Tensor, d_min: float = MIN_DEPTH, d_max: float = MAX_DEPTH):
    """sigmoid(logits) -> disparity in [1/d_max, 1/d_min] -> depth.

    Monotone decreasing in the logits; depth is confined to [d_min, d_max]
    by construction.
    """
    sig = sigmoid(logits)
    disp = T.add(T.mul(sig, 1.0 / d_min - 1.0 / d_max), 1.0 / d_max)
    depth = T.div(Tensor(np.ones((1,), dtype=logits.dtype)), disp)
    return disp, depth


class PoseNet(Module):
    """Conv feature extractor over a concatenated frame pair, pooled to a
    6-vector (rotation angles, translation)."""

    def __init__(self, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(6, 16, 3, stride=2, dtype=dtype)
        self.conv2 = Conv2d(16, 32, 3, stride=2, dtype=dtype)
        self.conv3 = Conv2d(32, 64, 3, stride=2, dtype=dtype)
        # bias prior: one raw unit of x translation matching the rig's
        # dominant motion (earlier->later transforms see the scene move -x).
        # This puts the initial depth/pose scales in the same regime, so
        # early warps are sub-pixel-wrong rather than automasked away.
        self.head = Linear(64, 6, init="normal", init_std=0.1,
                           bias_init=(0, 0, 0, -1.0, 0, 0), dtype=dtype)

    def forward(self, img_a: Tensor, img_b: Tensor) -> Tensor:
        if img_a.shape != img_b.shape:
            raise ValueError("pose inputs must share a shape")
        x = concat([img_a, img_b], 1)
        x = gelu(self.conv1.forward(x))
        x = gelu(self.conv2.forward(x))
        x = gelu(self.conv3.forward(x))
        pooled = T.reduce("mean", x, dim=(2, 3))
        return self.head.forward(pooled)


class StudentState:
    """Cost-volume depth range: EMA-tracked bounds and the current bins."""

    EMA_MOMENTUM = 0.99
    MIN_SEPARATION = 0.5

    def __init__(self, bin_count: int = 16, d_min: float = MIN_DEPTH, d_max: float = MAX_DEPTH):
        self.d_min_ema = float(d_min)
        self.d_max_ema = float(d_max)
        self.bins = build_depth_bins(d_min, d_max, bin_count)

    def rebuild_bins(self) -> None:
        self.bins = build_depth_bins(self.d_min_ema, self.d_max_ema, self.bins.count)


def update_depth_range(state: StudentState, predicted_depths: np.ndarray) -> StudentState:
    """EMA (momentum 0.99) of the batch 5th/95th depth percentiles.

    Bounds keep a minimum separation; bins are rebuilt at epoch boundaries via
    state.rebuild_bins(), not here.
    """
    lo = float(np.percentile(predicted_depths, 5))
    hi = float(np.percentile(predicted_depths, 95))
    m = state.EMA_MOMENTUM
    state.d_min_ema = m * state.d_min_ema + (1 - m) * lo
    state.d_max_ema = m * state.d_max_ema + (1 - m) * hi
    gap = state.d_max_ema - state.d_min_ema
    if gap < state.MIN_SEPARATION:
        mid = 0.5 * (state.d_min_ema + state.d_max_ema)
        half = 0.5 * state.MIN_SEPARATION
        state.d_min_ema = max(mid - half, 1e-3)
        state.d_max_ema = state.d_min_ema + state.MIN_SEPARATION
    return state


class DepthNet(Module):
    """Encoder + decoder pair (the teacher, or the student's backbone)."""

    def __init__(self, enc_cfg: EncoderConfig, adapter_cfg: AdapterConfig | None,
                 decoder_adapter: bool = False, dtype=np.float32):
        super().__init__()
        self.encoder = Encoder(enc_cfg, adapter_cfg, dtype=dtype)
        adapter = None
        if decoder_adapter:
            if adapter_cfg is None:
                raise ValueError("decoder adapter requires an AdapterConfig")
            adapter = DecoderAdapter(enc_cfg.stage_channels, adapter_cfg, dtype=dtype)
        self.decoder = DepthDecoder(enc_cfg.stage_channels, adapter, dtype=dtype)

    def forward(self, image: Tensor):
        logits = self.decoder.forward(self.encoder.forward(image))
        disp, depth = disparity_to_depth(logits)
        return {"logits": logits, "disp": disp, "depth": depth}


class StudentNet(DepthNet):
    """DepthNet with a cost-volume branch after encoder stage 1."""

    def __init__(self, enc_cfg: EncoderConfig, adapter_cfg: AdapterConfig | None,
                 bin_count: int = 16, decoder_adapter: bool = False, dtype=np.float32):
        super().__init__(enc_cfg, adapter_cfg, decoder_adapter, dtype=dtype)
        c0 = enc_cfg.stage_channels[0]
        self.reduce = Conv2d(c0 + bin_count, c0, 3, dtype=dtype)
        self.bin_count = bin_count

    def forward_pair(self, img_t: Tensor, img_tm1: Tensor, pose_t_to_tm1, K_quarter,
                     state: StudentState):
        """pose_t_to_tm1 is a detached value-level Pose (or one per batch item)."""
        f0_t = self.encoder.forward_stage1(img_t)
        f0_tm1 = self.encoder.forward_stage1(img_tm1)
        cv = build_cost_volume(f0_t, f0_tm1, pose_t_to_tm1, K_quarter, state.bins)
        fused = self.reduce.forward(concat([f0_t, cv], 1))
        pyramid = self.encoder.forward_rest(fused)
        logits = self.decoder.forward(pyramid)
        disp, depth = disparity_to_depth(logits)
        return {"logits": logits, "disp": disp, "depth": depth, "cost_volume": cv}


class DepthModel(Module):
    """Teacher + student depth networks and the shared pose network."""

    def __init__(self, enc_cfg: EncoderConfig | None = None,
                 adapter_cfg: AdapterConfig | None = None,
                 decoder_adapter: bool = False, bin_count: int = 16, dtype=np.float32):
        super().__init__()
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.adapter_cfg = adapter_cfg
        self.teacher = DepthNet(self.enc_cfg, adapter_cfg, decoder_adapter, dtype=dtype)
        self.student = StudentNet(self.enc_cfg, adapter_cfg, bin_count, decoder_adapter, dtype=dtype)
        self.pose = PoseNet(dtype=dtype)
        self.has_decoder_adapter = decoder_adapter


def build_model(enc_cfg: EncoderConfig | None = None, adapter_cfg: AdapterConfig | None = None,
                decoder_adapter: bool = False, bin_count: int = 16, seed: int = 0,
                dtype=np.float32) -> DepthModel:
    """Construct, name, and deterministically initialize a full model.

    Base weights depend only on (seed, parameter name), so adding adapters
    never shifts the init of pre-existing parameters.
    """
    model = DepthModel(enc_cfg, adapter_cfg, decoder_adapter, bin_count, dtype=dtype)
    model.finalize()
    model.initialize(seed, dtype=dtype)
    return model
