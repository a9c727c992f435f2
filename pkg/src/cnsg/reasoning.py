"""Graph reasoning over per-class nodes and channel-gated feature refinement.

An adjacency matrix is projected from the node matrix itself, node features
are smoothed with (I - A), transformed, rectified, aggregated over valid
classes, and turned into a per-channel sigmoid gate applied residually to the
backbone feature: out = (1 + gate) * feature.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .core import FeatureMap


class GraphReasoner(nn.Module):
    """Learned adjacency + Laplacian-style smoothing + channel gate.

    node_dim D = feature channels + flattened CAM size. adjacency_proj and
    node_transform are bias-free so that zero parameters give a zero adjacency
    and zero nodes give zero reasoned output; gate_proj keeps its bias.
    """

    def __init__(self, num_classes: int, node_dim: int, feature_channels: int, reasoned_dim: int | None = None):
        super().__init__()
        self.num_classes = num_classes
        self.node_dim = node_dim
        self.feature_channels = feature_channels
        self.reasoned_dim = reasoned_dim or feature_channels
        self.adjacency_proj = nn.Linear(node_dim, num_classes, bias=False)
        self.node_transform = nn.Linear(node_dim, self.reasoned_dim, bias=False)
        self.gate_proj = nn.Linear(self.reasoned_dim, feature_channels)

    def adjacency(self, nodes: Tensor) -> Tensor:
        """[N, D] node matrix -> [N, N] adjacency scores (unnormalized)."""
        if nodes.dim() != 2 or nodes.shape != (self.num_classes, self.node_dim):
            raise ValueError(f"nodes must be [{self.num_classes}, {self.node_dim}], got {tuple(nodes.shape)}")
        return self.adjacency_proj(nodes)

    def graph_reason(self, nodes: Tensor, adjacency: Tensor | None = None) -> Tensor:
        """Smooth nodes with (I - A), transform, rectify -> [N, D_r].

        adjacency may be injected explicitly (analysis/tests); by default it is
        computed from the nodes.
        """
        a = self.adjacency(nodes) if adjacency is None else adjacency
        eye = torch.eye(self.num_classes, dtype=nodes.dtype, device=nodes.device)
        smoothed = (eye - a) @ nodes
        return torch.relu(self.node_transform(smoothed))

    def channel_gate_refine(self, f_o: FeatureMap, reasoned: Tensor, valid: Tensor | None = None) -> FeatureMap:
        """Gate the feature channels by the aggregated reasoned nodes.

        valid flags which rows of `reasoned` belong to present classes; rows of
        absent classes are excluded from the mean. With no valid rows the zero
        aggregate is used, so the gate degrades to sigmoid(bias).
        """
        if valid is None:
            valid = torch.ones(reasoned.shape[0], dtype=torch.bool, device=reasoned.device)
        valid = valid.bool()
        if bool(valid.any()):
            aggregate = reasoned[valid].mean(dim=0)
        else:
            aggregate = torch.zeros(self.reasoned_dim, dtype=f_o.data.dtype, device=f_o.data.device)
        gate = torch.sigmoid(self.gate_proj(aggregate))
        refined = f_o.data * (1.0 + gate)[:, None, None]
        return FeatureMap(refined, stride=f_o.stride)

    def forward(self, f_o: FeatureMap, nodes: Tensor, valid: Tensor | None = None) -> FeatureMap:
        """Full refinement path: reason over nodes, then gate the feature."""
        reasoned = self.graph_reason(nodes)
        return self.channel_gate_refine(f_o, reasoned, valid)
