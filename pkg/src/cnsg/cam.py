"""Auxiliary centroid classifier, class activation maps, and the classification loss.

The classifier is trained on class centroids (per-class masked feature means),
and its weight rows double as the CAM projection: the activation map for class
n is the weight-row-n weighted sum of the feature channels, restricted to the
class region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import BinaryMask, FeatureMap, LabelMap, masked_mean


class NoPresentClassesError(ValueError):
    """Raised when a frame yields no class centroids (only ignore pixels)."""


class CentroidClassifier(nn.Module):
    """Linear classifier over [K] centroid vectors; weight rows feed compute_cam."""

    def __init__(self, num_classes: int, channels: int, bias: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.channels = channels
        self.linear = nn.Linear(channels, num_classes, bias=bias)

    @property
    def weights(self) -> Tensor:
        return self.linear.weight  # [N, K]

    def forward(self, centroids: Tensor) -> Tensor:
        return self.linear(centroids)


@dataclass
class CamStack:
    """Per-class activation maps [N, H', W'] plus a per-class presence flag."""

    data: Tensor
    valid: Tensor

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError(f"CamStack wants [N, H', W'], got {tuple(self.data.shape)}")
        self.valid = torch.as_tensor(self.valid).bool()
        if self.valid.shape != (self.data.shape[0],):
            raise ValueError("valid must have one flag per class")
        absent = ~self.valid
        if absent.any() and bool(self.data[absent].abs().sum() > 0):
            raise ValueError("invalid classes must carry all-zero maps")


def class_feature_mask(label: LabelMap, class_id: int, feature_stride: int) -> BinaryMask:
    """Class-region mask at feature resolution (nearest-neighbor label downsampling)."""
    if not 0 <= class_id < label.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {label.num_classes})")
    down = label.data[::feature_stride, ::feature_stride]
    return BinaryMask(down == class_id)


def class_centroid(feature: FeatureMap, mask: BinaryMask) -> Tensor:
    """Mean feature vector over the class region -> [K]."""
    return masked_mean(feature, mask)


def classification_loss(centroids: list[tuple[int, Tensor]], classifier: CentroidClassifier) -> Tensor:
    """Mean cross-entropy of the classifier over (class_id, centroid) pairs."""
    if not centroids:
        raise NoPresentClassesError("no class centroids for this frame")
    ids = torch.tensor([c for c, _ in centroids], dtype=torch.long)
    stacked = torch.stack([v for _, v in centroids])
    logits = classifier(stacked)
    return F.cross_entropy(logits, ids)


def compute_cam(
    feature: FeatureMap, classifier: CentroidClassifier, class_id: int, class_mask: BinaryMask
) -> Tensor:
    """Class activation map: weight-row dot product with the class-masked feature.

    Returns [H', W']; exactly zero outside class_mask. The classifier bias does
    not enter (weights only, following the standard CAM construction).
    """
    masked = feature.data * class_mask.data.to(feature.data.dtype)
    w = classifier.weights[class_id].to(feature.data.dtype)
    return torch.einsum("k,khw->hw", w, masked)
