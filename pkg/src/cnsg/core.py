"""Shared tensor types and differentiable resampling primitives.

Everything downstream (CAM extraction, temporal fusion, the data pipeline's
warp-consistency checks) goes through the bilinear helpers defined here, so
there is exactly one interpolation convention in the codebase: align-corners
sampling with border replication for out-of-range coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


class EmptyMaskError(ValueError):
    """Raised when a reduction is requested over a mask with no true pixels."""


def _as_tensor(data, dtype=None) -> Tensor:
    t = torch.as_tensor(data)
    if dtype is not None and t.dtype != dtype:
        t = t.to(dtype)
    return t


@dataclass
class FeatureMap:
    """A [K, H, W] feature tensor plus its downsampling stride w.r.t. the input image."""

    data: Tensor
    stride: int = 1

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise ValueError(f"FeatureMap wants [K, H, W], got shape {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            self.data = self.data.float()
        if self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    """Integer [H, W] class map; entries are class ids in [0, num_classes) or ignore_index."""

    data: Tensor
    num_classes: int
    ignore_index: int = 255

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.dim() != 2:
            raise ValueError(f"LabelMap wants [H, W], got shape {tuple(self.data.shape)}")
        if self.data.is_floating_point():
            raise ValueError("LabelMap entries must be integers")
        self.data = self.data.long()
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if 0 <= self.ignore_index < self.num_classes:
            raise ValueError("ignore_index must lie outside the class id range")
        bad = (self.data != self.ignore_index) & ((self.data < 0) | (self.data >= self.num_classes))
        if bool(bad.any()):
            raise ValueError(
                f"label entries must lie in [0, {self.num_classes}) or equal {self.ignore_index}"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid(self) -> Tensor:
        return self.data != self.ignore_index


@dataclass
class FlowField:
    """Dense motion field [2, H, W]; plane 0 is dx (columns), plane 1 is dy (rows).

    Convention: `flow` maps the current frame back onto the previous one, i.e.
    current_pixel(y, x) came from previous_pixel(y - dy, x - dx).
    """

    data: Tensor

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.dim() != 3 or self.data.shape[0] != 2:
            raise ValueError(f"FlowField wants [2, H, W], got shape {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            self.data = self.data.float()

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dx(self) -> Tensor:
        return self.data[0]

    @property
    def dy(self) -> Tensor:
        return self.data[1]


@dataclass
class BinaryMask:
    """Boolean [H, W] mask."""

    data: Tensor

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.dim() != 2:
            raise ValueError(f"BinaryMask wants [H, W], got shape {tuple(self.data.shape)}")
        if self.data.dtype != torch.bool:
            self.data = self.data != 0

    def count(self) -> int:
        return int(self.data.sum())

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.data & other.data)

    def __invert__(self) -> "BinaryMask":
        return BinaryMask(~self.data)


def _corner_coords(src: int, dst: int, dtype, device) -> Tensor:
    """Align-corners source coordinates for resampling `src` samples to `dst`."""
    if dst == 1:
        # degenerate axis: sample the midpoint so up/down round trips stay symmetric
        return torch.full((1,), (src - 1) / 2.0, dtype=dtype, device=device)
    return torch.linspace(0.0, src - 1, dst, dtype=dtype, device=device)


def _sample_bilinear(data: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample [K, H, W] data at real-valued (ys, xs) grids with border clamping.

    ys/xs are broadcast-compatible [h, w] tensors of source coordinates; the
    result is [K, h, w]. Differentiable in `data` (gather + convex weights).
    """
    k, h, w = data.shape
    ys = ys.clamp(0.0, float(h - 1))
    xs = xs.clamp(0.0, float(w - 1))
    y0 = ys.floor()
    x0 = xs.floor()
    y1 = torch.clamp(y0 + 1, max=float(h - 1))
    x1 = torch.clamp(x0 + 1, max=float(w - 1))
    wy = (ys - y0).to(data.dtype)
    wx = (xs - x0).to(data.dtype)
    y0l, y1l, x0l, x1l = y0.long(), y1.long(), x0.long(), x1.long()
    v00 = data[:, y0l, x0l]
    v01 = data[:, y0l, x1l]
    v10 = data[:, y1l, x0l]
    v11 = data[:, y1l, x1l]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def _resize_stride(stride: int, src_h: int, dst_h: int) -> int:
    # best-effort metadata: exact when the ratio divides evenly
    return max(1, round(stride * src_h / dst_h))


def bilinear_resize(fmap: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Resize a feature map with align-corners bilinear interpolation."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be positive")
    data = fmap.data
    if (target_h, target_w) == (fmap.height, fmap.width):
        return FeatureMap(data, stride=fmap.stride)
    ys = _corner_coords(fmap.height, target_h, torch.float64, data.device)
    xs = _corner_coords(fmap.width, target_w, torch.float64, data.device)
    grid_y = ys[:, None].expand(target_h, target_w)
    grid_x = xs[None, :].expand(target_h, target_w)
    out = _sample_bilinear(data, grid_y, grid_x)
    return FeatureMap(out, stride=_resize_stride(fmap.stride, fmap.height, target_h))


def bilinear_warp(fmap: FeatureMap, flow: FlowField) -> FeatureMap:
    """Warp a map by a flow field: out(y, x) = in(y - dy, x - dx), border-clamped."""
    if (fmap.height, fmap.width) != (flow.height, flow.width):
        raise ValueError(
            f"flow shape {(flow.height, flow.width)} does not match map {(fmap.height, fmap.width)}"
        )
    h, w = fmap.height, fmap.width
    dev = fmap.data.device
    base_y = torch.arange(h, dtype=torch.float64, device=dev)[:, None].expand(h, w)
    base_x = torch.arange(w, dtype=torch.float64, device=dev)[None, :].expand(h, w)
    ys = base_y - flow.dy.to(torch.float64)
    xs = base_x - flow.dx.to(torch.float64)
    return FeatureMap(_sample_bilinear(fmap.data, ys, xs), stride=fmap.stride)


def resize_flow(flow: FlowField, target_h: int, target_w: int) -> FlowField:
    """Resize a flow field, rescaling displacement magnitudes to the new grid."""
    resized = bilinear_resize(FeatureMap(flow.data), target_h, target_w).data
    if flow.width > 1:
        sx = (target_w - 1) / (flow.width - 1)
    else:
        sx = 1.0
    if flow.height > 1:
        sy = (target_h - 1) / (flow.height - 1)
    else:
        sy = 1.0
    scale = torch.tensor([sx, sy], dtype=resized.dtype, device=resized.device)
    return FlowField(resized * scale[:, None, None])


def masked_mean(fmap: FeatureMap, mask: BinaryMask) -> Tensor:
    """Per-channel mean of a feature map over the true pixels of a mask -> [K]."""
    if (fmap.height, fmap.width) != (mask.data.shape[0], mask.data.shape[1]):
        raise ValueError("mask shape does not match feature map")
    if mask.count() == 0:
        raise EmptyMaskError("masked_mean over an empty mask")
    selected = fmap.data[:, mask.data]
    return selected.mean(dim=1)
