#!/usr/bin/env python3
"""
Graph VideoQA Backbone
Shared answer predictor: scene encoding, a clip+token graph with GCN propagation,
attention pooling, low-rank bilinear fusion and a classifier.
"""

from typing import Optional

import torch
import torch.nn as nn

from .encoders import SequenceEncoder
from .schema import EncodedQuestion, FusedRepresentation, GraphState, PredictionDistribution

ADJACENCY_EPS = 1e-8


def lengths_to_mask(lengths: Optional[torch.Tensor], max_len: int, batch_size: int) -> torch.Tensor:
    """B x max_len boolean mask of valid steps (all valid when lengths is None)"""
    if lengths is None:
        return torch.ones(batch_size, max_len, dtype=torch.bool)
    return torch.arange(max_len).unsqueeze(0) < lengths.to(torch.long).unsqueeze(1)


class GraphBuilder(nn.Module):
    """Adjacency from two rectified projections, symmetrized and row-normalized"""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.mlp5 = nn.Linear(hidden_size, hidden_size)
        self.mlp6 = nn.Linear(hidden_size, hidden_size)

    def forward(self, nodes: torch.Tensor, node_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        left = torch.relu(self.mlp5(nodes))
        right = torch.relu(self.mlp6(nodes))
        graph = left @ right.transpose(-1, -2)
        graph = 0.5 * (graph + graph.transpose(-1, -2)) + ADJACENCY_EPS
        if node_mask is not None:
            pair_mask = node_mask.unsqueeze(-1) & node_mask.unsqueeze(-2)
            graph = graph * pair_mask.to(graph.dtype)
        return graph / graph.sum(dim=-1, keepdim=True).clamp_min(ADJACENCY_EPS)


class GCNLayer(nn.Module):
    """act(A . H . W) + H"""

    def __init__(self, hidden_size: int, activation: bool = True):
        super().__init__()
        self.weight = nn.Linear(hidden_size, hidden_size, bias=False)
        self.activation = activation

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        out = adjacency @ self.weight(nodes)
        if self.activation:
            out = torch.relu(out)
        return out + nodes


class AttentionPool(nn.Module):
    """Softmax-weighted sum of nodes under a learned score"""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.score = nn.Linear(hidden_size, 1)

    def forward(self, nodes: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        scores = self.score(nodes).squeeze(-1)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return (weights.unsqueeze(-1) * nodes).sum(dim=-2)


class BlockFusion(nn.Module):
    """
    Low-rank bilinear fusion: per-rank projections of both inputs multiplied
    elementwise, summed over ranks, then projected.
    """

    def __init__(self, hidden_size: int, rank: int = 4, output_size: Optional[int] = None):
        super().__init__()
        self.rank = rank
        self.hidden_size = hidden_size
        self.proj_a = nn.Linear(hidden_size, hidden_size * rank, bias=False)
        self.proj_b = nn.Linear(hidden_size, hidden_size * rank, bias=False)
        self.proj_out = nn.Linear(hidden_size, output_size or hidden_size)

    def bilinear(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Fused value before the output projection"""
        shape = a.shape[:-1] + (self.rank, self.hidden_size)
        za = self.proj_a(a).view(shape)
        zb = self.proj_b(b).view(shape)
        return (za * zb).sum(dim=-2)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.proj_out(self.bilinear(a, b))


class BackbonePredictor(nn.Module):
    """
    The answer predictor shared by every scene fed to it.

    Pipeline: scene LSTM -> graph over [scene; question tokens] -> GCN layers ->
    attention pooling (local factor) -> fusion with globals -> classifier.
    """

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_answers: int,
        graph_layers: int = 2,
        fusion_rank: int = 4,
    ):
        super().__init__()
        self.scene_encoder = SequenceEncoder(input_size, hidden_size)
        self.graph_builder = GraphBuilder(hidden_size)
        self.gcn_layers = nn.ModuleList([GCNLayer(hidden_size) for _ in range(graph_layers)])
        self.pool = AttentionPool(hidden_size)
        self.global_fusion = BlockFusion(hidden_size, fusion_rank)
        self.final_fusion = BlockFusion(hidden_size, fusion_rank)
        self.classifier = nn.Sequential(
            nn.Linear(hidden_size, hidden_size),
            nn.ELU(),
            nn.Linear(hidden_size, num_answers),
        )

    def build_graph(
        self,
        scene_local: torch.Tensor,
        q_local: torch.Tensor,
        scene_mask: Optional[torch.Tensor] = None,
    ) -> GraphState:
        """Nodes are scene clips followed by question tokens"""
        B, N, L = scene_local.shape[0], scene_local.shape[1], q_local.shape[1]
        if scene_mask is None:
            scene_mask = torch.ones(B, N, dtype=torch.bool)
        node_mask = torch.cat([scene_mask, torch.ones(B, L, dtype=torch.bool)], dim=1)
        nodes = torch.cat([scene_local, q_local], dim=1)
        return GraphState(
            nodes=nodes,
            adjacency=self.graph_builder(nodes, node_mask),
            node_mask=node_mask,
        )

    def gcn_propagate(self, state: GraphState, layers: Optional[int] = None) -> torch.Tensor:
        """Apply the first `layers` GCN layers (all by default)"""
        layers = len(self.gcn_layers) if layers is None else layers
        nodes = state.nodes
        for layer in list(self.gcn_layers)[:layers]:
            nodes = layer(nodes, state.adjacency)
        return nodes

    def represent(
        self,
        scene: torch.Tensor,
        question: EncodedQuestion,
        lengths: Optional[torch.Tensor] = None,
    ) -> FusedRepresentation:
        scene_local, scene_global = self.scene_encoder(scene, lengths)
        scene_mask = lengths_to_mask(lengths, scene.shape[1], scene.shape[0])
        state = self.build_graph(scene_local, question.q_local, scene_mask)
        nodes = self.gcn_propagate(state)
        s_local = self.pool(nodes, state.node_mask)
        s_global = self.global_fusion(scene_global, question.q_global)
        return FusedRepresentation(
            s_local=s_local,
            s_global=s_global,
            s_final=self.final_fusion(s_global, s_local),
        )

    def predict(
        self,
        scene: torch.Tensor,
        question: EncodedQuestion,
        lengths: Optional[torch.Tensor] = None,
    ) -> PredictionDistribution:
        """
        Answer distribution for a scene and question

        Args:
            scene: B x N x input_size scene features
            question: Encoded question
            lengths: Valid scene rows per instance (all rows when None)

        Returns:
            PredictionDistribution over num_answers
        """
        return PredictionDistribution(logits=self.classifier(self.represent(scene, question, lengths).s_final))

    forward = predict
