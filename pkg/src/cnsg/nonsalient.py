"""Non-salient region extraction, EMA prototypes, and graph-node assembly.

The non-salient region of a class is the set of class pixels whose activation
falls at or below the alpha-quantile threshold of the class activation map.
Per-frame means over that region feed an EMA prototype bank, and each class's
graph node is its prototype concatenated with the (normalized, flattened) CAM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .core import BinaryMask, FeatureMap, masked_mean


class UninitializedClassError(ValueError):
    """Raised when a node is requested for a class with no prototype yet."""


class PrototypeBank(nn.Module):
    """EMA store of per-class non-salient prototypes [N, K].

    Rows stay all-zero until the first observation for that class arrives.
    Buffers (not parameters): the bank never receives gradient updates.
    """

    def __init__(self, num_classes: int, channels: int, ema_lambda: float = 0.9):
        super().__init__()
        if not 0.0 <= ema_lambda <= 1.0:
            raise ValueError("ema_lambda must lie in [0, 1]")
        self.ema_lambda = ema_lambda
        self.register_buffer("prototypes", torch.zeros(num_classes, channels))
        self.register_buffer("initialized", torch.zeros(num_classes, dtype=torch.bool))

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]


def nonsalient_mask(cam: Tensor, alpha: float) -> BinaryMask:
    """Pixels with 0 < cam <= tau, where tau is the J-th largest CAM value.

    J = max(1, floor(H'*W'*alpha)) for alpha > 0; alpha = 0 keeps every
    strictly-positive pixel (tau = max). Ties at tau are retained. A CAM with
    no positive values yields an empty mask.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if cam.dim() != 2:
        raise ValueError(f"cam must be [H', W'], got {tuple(cam.shape)}")
    flat = cam.detach().reshape(-1)
    if alpha == 0.0:
        tau = flat.max()
    else:
        j = max(1, math.floor(flat.numel() * alpha))
        tau = torch.topk(flat, j).values[-1]
    return BinaryMask((cam > 0) & (cam <= tau))


def nonsalient_centroid(feature: FeatureMap, class_mask: BinaryMask, ns_mask: BinaryMask) -> Tensor:
    """Mean feature over the class's non-salient pixels -> [K]; may raise EmptyMask."""
    return masked_mean(feature, class_mask & ns_mask)


def ema_update(bank: PrototypeBank, class_id: int, p_prime: Tensor) -> PrototypeBank:
    """Blend a fresh per-frame centroid into the bank row (first observation copies).

    The stored state is detached: gradients flow through per-frame centroids
    only, never through the accumulator.
    """
    if not 0 <= class_id < bank.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {bank.num_classes})")
    p = p_prime.detach().to(bank.prototypes.dtype)
    if not bool(torch.isfinite(p).all()):
        raise ValueError("p_prime must be finite")
    with torch.no_grad():
        if bank.initialized[class_id]:
            lam = bank.ema_lambda
            bank.prototypes[class_id] = lam * bank.prototypes[class_id] + (1.0 - lam) * p
        else:
            bank.prototypes[class_id] = p
            bank.initialized[class_id] = True
    return bank


@dataclass
class CnsfNode:
    """Graph node vector: prototype [K] followed by the flattened CAM [H'*W']."""

    data: Tensor

    def __post_init__(self):
        if self.data.dim() != 1:
            raise ValueError("CnsfNode wants a flat vector")


def _normalize_cam(cam: Tensor) -> Tensor:
    """Min-max normalize over the positive support; non-positive pixels go to 0."""
    pos = cam > 0
    if not bool(pos.any()):
        return torch.zeros_like(cam)
    vals = cam[pos]
    lo, hi = vals.min(), vals.max()
    span = hi - lo
    if span.item() <= 0:
        # constant positive support: mark it as fully present
        return pos.to(cam.dtype)
    scaled = (cam - lo) / span
    return torch.where(pos, scaled, torch.zeros_like(cam))


def assemble_cnsf(bank: PrototypeBank, class_id: int, cam: Tensor) -> CnsfNode:
    """Node = concat(prototype row, row-major flatten of the normalized CAM)."""
    if not 0 <= class_id < bank.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {bank.num_classes})")
    if not bool(bank.initialized[class_id]):
        raise UninitializedClassError(f"class {class_id} has no prototype yet")
    tail = _normalize_cam(cam).reshape(-1)
    return CnsfNode(torch.cat([bank.prototypes[class_id].to(tail.dtype), tail]))
