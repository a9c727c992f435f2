"""Inter-frame non-salient centroid alignment loss.

Pulls the per-frame non-salient centroids of adjacent frames together with an
L1 penalty, averaged over channels and over the classes present in both frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


class NoSharedClassesError(ValueError):
    """Raised when the two frames have no class with centroids in both."""


@dataclass
class FrameCentroids:
    """Per-class centroid matrix [N, K] plus presence flags; absent rows are unused."""

    centroids: Tensor
    present: Tensor

    def __post_init__(self):
        self.present = torch.as_tensor(self.present).bool()
        if self.centroids.dim() != 2:
            raise ValueError(f"centroids must be [N, K], got {tuple(self.centroids.shape)}")
        if self.present.shape != (self.centroids.shape[0],):
            raise ValueError("present must have one flag per class")

    @classmethod
    def from_dict(cls, by_class: dict[int, Tensor], num_classes: int) -> "FrameCentroids":
        """Build from {class_id: centroid}; missing classes get zero rows."""
        if by_class:
            k = next(iter(by_class.values())).numel()
            dtype = next(iter(by_class.values())).dtype
        else:
            k, dtype = 1, torch.float32
        rows = []
        present = torch.zeros(num_classes, dtype=torch.bool)
        zero = torch.zeros(k, dtype=dtype)
        for n in range(num_classes):
            if n in by_class:
                rows.append(by_class[n])
                present[n] = True
            else:
                rows.append(zero)
        return cls(torch.stack(rows), present)


def nsca_loss(prev: FrameCentroids, curr: FrameCentroids) -> Tensor:
    """Mean over shared classes of the per-channel mean absolute centroid gap."""
    shared = prev.present & curr.present
    if not bool(shared.any()):
        raise NoSharedClassesError("no class present in both frames")
    diff = (prev.centroids[shared] - curr.centroids[shared]).abs()
    return diff.mean(dim=1).mean()
