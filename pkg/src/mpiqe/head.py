"""Multi-modal encoder: class-text queries attend over image tokens, then an MLP scores."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NUM_DISTORTIONS, NUM_SCENES
from .layers import Attention


def build_query(scene_emb: torch.Tensor | None, dist_emb: torch.Tensor | None) -> torch.Tensor:
    """Stack scene rows (9) above distortion rows (11). A branch may be None when ablated."""
    parts = []
    for emb, rows, what in ((scene_emb, NUM_SCENES, "scene"), (dist_emb, NUM_DISTORTIONS, "distortion")):
        if emb is None:
            continue
        if emb.dim() != 2 or emb.shape[0] != rows:
            raise ValueError(f"{what} embeddings must be {rows} x dim, got {tuple(emb.shape)}")
        parts.append(emb)
    if not parts:
        raise ValueError("query needs at least one of scene/distortion embeddings")
    if len(parts) == 2 and parts[0].shape[1] != parts[1].shape[1]:
        raise ValueError("scene and distortion embeddings differ in width")
    return torch.cat(parts, dim=0)


class DecoderBlock(nn.Module):
    """Pre-norm self-attention over the queries, then pre-norm cross-attention to the image."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)

    def forward(self, q: torch.Tensor, image_tokens: torch.Tensor) -> torch.Tensor:
        q = q + self.self_attn(self.norm_self(q))
        return q + self.cross_attn(self.norm_cross(q), context=image_tokens)


class MultiModalEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads) for _ in range(depth))

    def forward(self, query: torch.Tensor, image_tokens: torch.Tensor) -> torch.Tensor:
        """query (K, D) shared across the batch; image_tokens (B, 1 + b, D) -> (B, K, D)."""
        if query.dim() == 2:
            query = query.expand(image_tokens.shape[0], -1, -1)
        for block in self.blocks:
            query = block(query, image_tokens)
        return query


class ScoreHead(nn.Module):
    """Pool the decoded queries and regress one unbounded score per image."""

    def __init__(self, dim: int, num_queries: int, pooling: str = "mean"):
        super().__init__()
        self.pooling = pooling
        in_dim = dim if pooling == "mean" else dim * num_queries
        self.fc1 = nn.Linear(in_dim, dim)
        self.fc2 = nn.Linear(dim, 1)

    def forward(self, decoded: torch.Tensor) -> torch.Tensor:
        if self.pooling == "mean":
            pooled = decoded.mean(dim=-2)
        else:
            pooled = decoded.flatten(-2)
        return self.fc2(F.gelu(self.fc1(pooled))).squeeze(-1)
