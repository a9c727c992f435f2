"""Desk-scale segmentation network with temporal fused prediction.

A small strided conv backbone produces a low-level feature (stride 2) and a
deep feature f_o (stride 8 by default). An ASPP-style context block, the
refined deep feature, and the low-level feature are fused per frame; per-frame
logits of the current and (flow-warped) previous frame are concatenated and
classified again for the final prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .cam import CentroidClassifier
from .core import FeatureMap, FlowField, LabelMap, bilinear_resize, bilinear_warp, resize_flow
from .nonsalient import PrototypeBank
from .reasoning import GraphReasoner


class AllIgnoredError(ValueError):
    """Raised when a label map contains no supervised pixels."""


@dataclass
class BackboneConfig:
    """Structure of the feature extractor and attached heads."""

    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    num_classes: int = 5
    convs_per_stage: int = 2
    bias: bool = True
    aspp_channels: int = 64
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    reasoned_dim: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != len(self.strides):
            raise ValueError("stage_channels and strides must have equal length")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages (low-level + deep)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def feature_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def low_channels(self) -> int:
        return self.stage_channels[0]


def _stage(in_ch: int, out_ch: int, stride: int, convs: int, bias: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=bias), nn.ReLU(inplace=True)]
    for _ in range(convs - 1):
        layers += [nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class Aspp(nn.Module):
    """Parallel dilated branches plus a global-pool branch, concatenated and projected."""

    def __init__(self, in_ch: int, out_ch: int, rates: tuple[int, ...], bias: bool = True):
        super().__init__()
        branches = []
        for r in rates:
            if r == 1:
                branches.append(nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=bias), nn.ReLU(inplace=True)))
            else:
                branches.append(
                    nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r, bias=bias), nn.ReLU(inplace=True))
                )
        self.branches = nn.ModuleList(branches)
        self.pool_conv = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=bias), nn.ReLU(inplace=True))
        self.project = nn.Sequential(nn.Conv2d(out_ch * (len(rates) + 1), out_ch, 1, bias=bias), nn.ReLU(inplace=True))

    def pool_branch(self, x: Tensor) -> Tensor:
        """Global average, broadcast back to the input's spatial size (pre-projection)."""
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return pooled.expand(-1, -1, x.shape[2], x.shape[3])

    def forward(self, x: Tensor) -> Tensor:
        outs = [branch(x) for branch in self.branches]
        outs.append(self.pool_conv(self.pool_branch(x)))
        return self.project(torch.cat(outs, dim=1))


class SegModel(nn.Module):
    """Backbone + context block + auxiliary heads + temporal fusion classifier.

    The input resolution is fixed at construction: the graph reasoner's node
    dimension embeds the flattened CAM, whose size is the deep-feature spatial
    extent for that resolution.
    """

    def __init__(self, config: BackboneConfig, input_hw: tuple[int, int] = (96, 96), ema_lambda: float = 0.9):
        super().__init__()
        self.config = config
        self.input_hw = tuple(input_hw)
        for d in self.input_hw:
            if d % (2 * config.feature_stride) != 0:
                raise ValueError(f"input size {self.input_hw} must be divisible by {2 * config.feature_stride}")

        stages = []
        in_ch = 3
        for ch, s in zip(config.stage_channels, config.strides):
            stages.append(_stage(in_ch, ch, s, config.convs_per_stage, config.bias))
            in_ch = ch
        self.stages = nn.ModuleList(stages)

        k = config.feature_channels
        n = config.num_classes
        self.context_block = Aspp(k, config.aspp_channels, config.aspp_rates, bias=config.bias)
        fuse_ch = config.aspp_channels + config.low_channels + k
        self.frame_classifier = nn.Conv2d(fuse_ch, n, 3, padding=1)
        self.fusion_classifier = nn.Conv2d(2 * n, n, 1)
        self.centroid_classifier = CentroidClassifier(n, k)
        h_f = self.input_hw[0] // config.feature_stride
        w_f = self.input_hw[1] // config.feature_stride
        self.cam_hw = (h_f, w_f)
        self.node_dim = k + h_f * w_f
        self.reasoner = GraphReasoner(n, self.node_dim, k, config.reasoned_dim)
        self.bank = PrototypeBank(n, k, ema_lambda)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def extract_features(self, image: Tensor) -> tuple[FeatureMap, FeatureMap]:
        """[3, H, W] image in [0,1] -> (deep f_o, low-level f_low)."""
        if image.dim() != 3 or image.shape != (3, *self.input_hw):
            raise ValueError(f"image must be [3, {self.input_hw[0]}, {self.input_hw[1]}], got {tuple(image.shape)}")
        x = image.unsqueeze(0)
        low = None
        running = 1
        low_stride = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            running *= self.config.strides[i]
            if i == 0:
                low = x
                low_stride = running
        f_o = FeatureMap(x.squeeze(0), stride=self.config.feature_stride)
        f_low = FeatureMap(low.squeeze(0), stride=low_stride)
        return f_o, f_low

    def aspp(self, f_o: FeatureMap) -> FeatureMap:
        """Multi-scale context feature f_h, same spatial size as f_o."""
        out = self.context_block(f_o.data.unsqueeze(0)).squeeze(0)
        return FeatureMap(out, stride=f_o.stride)

    def frame_logits(self, f_t: FeatureMap) -> Tensor:
        return self.frame_classifier(f_t.data.unsqueeze(0)).squeeze(0)

    def temporal_fuse_predict(self, f_t: FeatureMap, f_prev: FeatureMap, flow: FlowField) -> Tensor:
        """Fused per-pixel class distribution [N, H, W] at input resolution.

        Previous-frame logits are warped into the current frame by the flow
        (resized and magnitude-rescaled to logit resolution) before fusion.
        """
        if (f_t.height, f_t.width) != (f_prev.height, f_prev.width):
            raise ValueError("current and previous frame features must share a resolution")
        logits_t = self.frame_logits(f_t)
        logits_prev = self.frame_logits(f_prev)
        flow_l = resize_flow(flow, logits_t.shape[1], logits_t.shape[2])
        warped = bilinear_warp(FeatureMap(logits_prev), flow_l).data
        fused = self.fusion_classifier(torch.cat([logits_t, warped], dim=0).unsqueeze(0)).squeeze(0)
        up = bilinear_resize(FeatureMap(fused), *self.input_hw).data
        return torch.softmax(up, dim=0)


def fuse_frame_feature(f_h: FeatureMap, f_low: FeatureMap, f_bar: FeatureMap) -> FeatureMap:
    """Upsample context and refined features to the low-level grid and concatenate."""
    th, tw = f_low.height, f_low.width
    up_h = bilinear_resize(f_h, th, tw).data
    up_bar = bilinear_resize(f_bar, th, tw).data
    return FeatureMap(torch.cat([up_h, f_low.data, up_bar], dim=0), stride=f_low.stride)


def segmentation_loss(pred: Tensor, label: LabelMap) -> Tensor:
    """Mean negative log-probability of the true class over supervised pixels."""
    if pred.dim() != 3 or pred.shape[1:] != label.data.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} does not match label {tuple(label.data.shape)}")
    valid = label.valid()
    if not bool(valid.any()):
        raise AllIgnoredError("label map has no supervised pixels")
    idx = label.data.clamp(0, pred.shape[0] - 1)
    p_true = pred.gather(0, idx.unsqueeze(0)).squeeze(0)
    tiny = torch.finfo(pred.dtype).tiny
    return -(p_true[valid].clamp_min(tiny).log()).mean()
