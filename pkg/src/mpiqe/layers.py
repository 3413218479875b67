"""Transformer building blocks shared by the text, vision and fusion stacks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite (or normalisable) was not."""


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if not torch.all(torch.isfinite(norm) & (norm > 0)):
        raise NonFiniteError("non-finite normalization: zero or non-finite vector norm")
    return x / norm


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with optional separate key/value input."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        return t.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        dots = q @ k.transpose(-1, -2) * self.scale
        if mask is not None:
            dots = dots + mask
        out = dots.softmax(dim=-1) @ v
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Pre-norm residual block: self-attention followed by an MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), mask=mask)
        x = x + self.mlp(self.ln_2(x))
        return x


def causal_mask(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    mask = torch.full((n, n), float("-inf"), dtype=dtype, device=device)
    return torch.triu(mask, diagonal=1)
