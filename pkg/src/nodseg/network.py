"""Dual-branch segmentation/classification network with a variational output.

A ResNet-50-style binary classifier runs alongside a residual U-Net whose
blocks use depthwise separable convolutions and whose deepest encoder and
final decoder stages contain ASPP. Classifier stage features are injected
into the segmentation encoder by feature-combination blocks wherever the two
branches share a spatial resolution. The segmentation head emits logits u;
the output mask comes from the confidence-modulated variational solver (or a
plain sigmoid when that layer is disabled, as during pretraining).

Every parameter belongs to exactly one named group (S1..S9, C1..C5, FC,
FCB1..FCBm, STD); the transfer-learning freeze machinery addresses groups by
these names.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError
from .std_activation import STDLayer, STDParams, variational_sigmoid

# spatial downsampling factor of each stage output, relative to the input
_CLS_FACTOR = {"C1": 2, "C2": 4, "C3": 8, "C4": 16, "C5": 32}
_SEG_FACTOR = {"S1": 1, "S2": 2, "S3": 4, "S4": 8, "S5": 16}

DEFAULT_COMBINE_PAIRS = (("C2", "S3"), ("C3", "S4"), ("C4", "S5"))


@dataclass
class ModelConfig:
    """Construction-time architecture choices (widths, rates, placements)."""

    in_channels: int = 1
    encoder_widths: tuple = (64, 128, 256, 512, 512)
    decoder_widths: tuple = (256, 128, 64, 64)
    classifier_base_width: int = 64
    classifier_blocks: tuple = (3, 4, 6, 3)
    aspp_rates: tuple = (1, 5, 10, 15)
    combination_enabled: bool = True
    combine_pairs: tuple = DEFAULT_COMBINE_PAIRS
    combine_zero_init: bool = True
    std: STDParams = field(default_factory=STDParams)

    def validate(self) -> None:
        if len(self.encoder_widths) != 5:
            raise ConfigurationError("encoder_widths must list S1..S5")
        if len(self.decoder_widths) != 4:
            raise ConfigurationError("decoder_widths must list S6..S9")
        if len(self.classifier_blocks) != 4:
            raise ConfigurationError("classifier_blocks must list C2..C5 depths")
        widths = (*self.encoder_widths, *self.decoder_widths, self.classifier_base_width)
        if any(w < 1 for w in widths):
            raise ConfigurationError("channel widths must be >= 1")
        if any(r < 1 for r in self.aspp_rates) or not self.aspp_rates:
            raise ConfigurationError("aspp_rates must be positive")
        for cls_name, seg_name in self.combine_pairs:
            if cls_name not in _CLS_FACTOR or seg_name not in _SEG_FACTOR:
                raise ConfigurationError(f"unknown combination pair ({cls_name}, {seg_name})")
            if _CLS_FACTOR[cls_name] != _SEG_FACTOR[seg_name]:
                raise ConfigurationError(
                    f"combination pair ({cls_name}, {seg_name}) mixes resolutions "
                    f"1/{_CLS_FACTOR[cls_name]} and 1/{_SEG_FACTOR[seg_name]}"
                )


@dataclass
class ForwardOutputs:
    u: Tensor  # segmentation logits, N x 1 x H x W
    c: Tensor  # classifier probability per item, shape (N,)
    x: Tensor  # relaxed mask in (0,1), same shape as u


class DepthwiseSeparableConv(nn.Module):
    """3x3 per-channel spatial convolution followed by a 1x1 point-wise one."""

    def __init__(self, nin: int, nout: int, stride: int = 1):
        super().__init__()
        self.nin = nin
        self.depthwise = nn.Conv2d(nin, nin, kernel_size=3, stride=stride, padding=1, groups=nin)
        self.pointwise = nn.Conv2d(nin, nout, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.nin:
            raise ConfigurationError(f"expected {self.nin} channels, got {x.shape[1]}")
        return self.pointwise(self.depthwise(x))


class SegBlock(nn.Module):
    """Pre-activation residual block built from depthwise separable convs."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            DepthwiseSeparableConv(in_ch, out_ch, stride=stride),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            DepthwiseSeparableConv(out_ch, out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x) + self.skip(x)


class ASPP(nn.Module):
    """Parallel atrous 3x3 branches (padding = rate) fused by a 1x1 conv.

    Branches and fusion carry no normalization or nonlinearity, so the module
    can represent the identity exactly (delta kernels + averaging fusion).
    """

    def __init__(self, in_ch: int, out_ch: int, rates=(1, 5, 10, 15)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_ch, in_ch, kernel_size=3, padding=r, dilation=r, bias=False)
            for r in rates
        )
        self.fuse = nn.Conv2d(in_ch * len(rates), out_ch, kernel_size=1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(torch.cat([branch(x) for branch in self.branches], dim=1))


class FeatureCombine(nn.Module):
    """Inject classifier features into the segmentation path at one resolution.

    out = f_seg + refine(fuse(cat(proj(f_cls), f_seg))) with proj and fuse 1x1
    convolutions and refine a depthwise separable 3x3. With zero_init the
    refine point-wise convolution starts at zero, so the block is an exact
    identity on f_seg at initialization. Inputs must already share spatial
    size; mismatches are an error, never resampled away.
    """

    def __init__(self, cls_ch: int, seg_ch: int, zero_init: bool = True):
        super().__init__()
        self.cls_ch = cls_ch
        self.seg_ch = seg_ch
        self.proj = nn.Conv2d(cls_ch, cls_ch, kernel_size=1)
        self.fuse = nn.Conv2d(cls_ch + seg_ch, seg_ch, kernel_size=1)
        self.refine = DepthwiseSeparableConv(seg_ch, seg_ch)
        if zero_init:
            nn.init.zeros_(self.refine.pointwise.weight)
            nn.init.zeros_(self.refine.pointwise.bias)

    def forward(self, f_cls: Tensor, f_seg: Tensor) -> Tensor:
        if f_cls.shape[0] != f_seg.shape[0] or f_cls.shape[2:] != f_seg.shape[2:]:
            raise ConfigurationError(
                f"combination inputs disagree: cls {tuple(f_cls.shape)} vs seg {tuple(f_seg.shape)}"
            )
        if f_cls.shape[1] != self.cls_ch or f_seg.shape[1] != self.seg_ch:
            raise ConfigurationError(
                f"combination channels disagree: got ({f_cls.shape[1]}, {f_seg.shape[1]}), "
                f"built for ({self.cls_ch}, {self.seg_ch})"
            )
        h = self.fuse(torch.cat([self.proj(f_cls), f_seg], dim=1))
        return f_seg + self.refine(h)


class Bottleneck(nn.Module):
    """Standard 1x1-3x3-1x1 residual bottleneck with 4x expansion."""

    expansion = 4

    def __init__(self, in_ch: int, mid_ch: int, stride: int = 1):
        super().__init__()
        out_ch = mid_ch * self.expansion
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, mid_ch, kernel_size=1, bias=False),
            nn.BatchNorm2d(mid_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid_ch, mid_ch, kernel_size=3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(mid_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid_ch, out_ch, kernel_size=1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.body(x) + self.skip(x), inplace=True)


def _bottleneck_stage(in_ch: int, mid_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(in_ch, mid_ch, stride=stride)]
    layers += [Bottleneck(mid_ch * Bottleneck.expansion, mid_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class NoduleSegNet(nn.Module):
    """The full dual-branch model; see module docstring for the layout."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        cfg.validate()
        self.config = cfg
        w1, w2, w3, w4, w5 = cfg.encoder_widths
        d6, d7, d8, d9 = cfg.decoder_widths
        b = cfg.classifier_base_width
        n2, n3, n4, n5 = cfg.classifier_blocks

        # classifier branch (stem + 4 bottleneck stages + sigmoid head)
        self.C1 = nn.Sequential(
            nn.Conv2d(cfg.in_channels, b, kernel_size=7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(b),
            nn.ReLU(inplace=True),
        )
        self.C2 = nn.Sequential(
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
            _bottleneck_stage(b, b, n2, stride=1),
        )
        self.C3 = _bottleneck_stage(4 * b, 2 * b, n3, stride=2)
        self.C4 = _bottleneck_stage(8 * b, 4 * b, n4, stride=2)
        self.C5 = _bottleneck_stage(16 * b, 8 * b, n5, stride=2)
        self.FC = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(32 * b, 1),
        )
        cls_channels = {"C1": b, "C2": 4 * b, "C3": 8 * b, "C4": 16 * b, "C5": 32 * b}

        # segmentation encoder; deepest stage carries ASPP
        self.S1 = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w1, kernel_size=3, padding=1),
            SegBlock(w1, w1),
        )
        self.S2 = SegBlock(w1, w2, stride=2)
        self.S3 = SegBlock(w2, w3, stride=2)
        self.S4 = SegBlock(w3, w4, stride=2)
        self.S5 = nn.Sequential(
            SegBlock(w4, w5, stride=2),
            ASPP(w5, w5, cfg.aspp_rates),
        )
        seg_channels = {"S1": w1, "S2": w2, "S3": w3, "S4": w4, "S5": w5}

        # decoder: nearest x2 upsample + skip concatenation + residual block;
        # the last stage carries ASPP and the 1-channel logits head
        self.S6 = SegBlock(w5 + w4, d6)
        self.S7 = SegBlock(d6 + w3, d7)
        self.S8 = SegBlock(d7 + w2, d8)
        self.S9 = nn.Sequential(
            SegBlock(d8 + w1, d9),
            ASPP(d9, d9, cfg.aspp_rates),
            nn.Conv2d(d9, 1, kernel_size=1),
        )

        self._combine_map = {}
        blocks = []
        if cfg.combination_enabled:
            for cls_name, seg_name in cfg.combine_pairs:
                block = FeatureCombine(
                    cls_channels[cls_name], seg_channels[seg_name], zero_init=cfg.combine_zero_init
                )
                self._combine_map[seg_name] = (cls_name, len(blocks))
                blocks.append(block)
        self.FCB = nn.ModuleList(blocks)

        self.STD = STDLayer(cfg.std)
        self._frozen_groups: set = set()

    # ------------------------------------------------------------- groups

    def group_modules(self) -> dict:
        groups = {name: getattr(self, name) for name in
                  ("S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9",
                   "C1", "C2", "C3", "C4", "C5", "FC", "STD")}
        for i, block in enumerate(self.FCB):
            groups[f"FCB{i + 1}"] = block
        return groups

    def group_names(self) -> list:
        return sorted(self.group_modules())

    def parameter_groups(self) -> dict:
        return {name: list(module.parameters()) for name, module in self.group_modules().items()}

    def set_frozen_groups(self, groups) -> None:
        """Mark groups frozen: no gradients, and BN statistics stop updating."""
        groups = set(groups)
        unknown = groups - set(self.group_modules())
        if unknown:
            raise ConfigurationError(f"unknown parameter groups: {sorted(unknown)}")
        self._frozen_groups = groups
        for name, module in self.group_modules().items():
            for param in module.parameters():
                param.requires_grad_(name not in groups)
        self.train(self.training)

    @property
    def frozen_groups(self) -> set:
        return set(self._frozen_groups)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen groups keep eval-mode statistics even while the rest trains
        if mode:
            for name in self._frozen_groups:
                self.group_modules()[name].eval()
        return self

    # ------------------------------------------------------------ forward

    def _combine(self, seg_name: str, cls_feats: dict, f_seg: Tensor) -> Tensor:
        if seg_name not in self._combine_map:
            return f_seg
        cls_name, index = self._combine_map[seg_name]
        return self.FCB[index](cls_feats[cls_name], f_seg)

    def forward(self, image: Tensor, std_enabled: bool = True) -> ForwardOutputs:
        cls_feats = {}
        h = image
        for name in ("C1", "C2", "C3", "C4", "C5"):
            h = getattr(self, name)(h)
            cls_feats[name] = h
        c = torch.sigmoid(self.FC(cls_feats["C5"])).reshape(-1)

        s1 = self._combine("S1", cls_feats, self.S1(image))
        s2 = self._combine("S2", cls_feats, self.S2(s1))
        s3 = self._combine("S3", cls_feats, self.S3(s2))
        s4 = self._combine("S4", cls_feats, self.S4(s3))
        s5 = self._combine("S5", cls_feats, self.S5(s4))

        def up(t: Tensor) -> Tensor:
            return F.interpolate(t, scale_factor=2, mode="nearest")

        h = self.S6(torch.cat([up(s5), s4], dim=1))
        h = self.S7(torch.cat([up(h), s3], dim=1))
        h = self.S8(torch.cat([up(h), s2], dim=1))
        u = self.S9(torch.cat([up(h), s1], dim=1))

        if std_enabled:
            x = self.STD(u, c)
        else:
            x = variational_sigmoid(u, 1.0)
        return ForwardOutputs(u=u, c=c, x=x)
