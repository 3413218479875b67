"""Vision branch: patch embedding, visual prompts and the frozen ViT encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .layers import TransformerLayer, l2_normalize

# CLIP preprocessing statistics
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class ImageFeatures:
    cls: torch.Tensor  # (B, vision_dim)
    patches: torch.Tensor  # (B, b, vision_dim)
    projected_cls: torch.Tensor  # (B, embed_dim), unit rows


class VisualPromptStack(nn.Module):
    """One block of ``n`` prompt tokens per transformer layer (or a single block when shallow)."""

    def __init__(self, depth: int, length: int, dim: int):
        super().__init__()
        self.prompts = nn.Parameter(torch.empty(depth, length, dim).uniform_(-0.05, 0.05))

    @property
    def depth(self) -> int:
        return self.prompts.shape[0]

    @property
    def length(self) -> int:
        return self.prompts.shape[1]


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.vision_dim
        self.patch_size = cfg.patch_size
        self.input_size = cfg.crop_size
        self.grid = cfg.grid_side
        self.conv1 = nn.Conv2d(3, dim, kernel_size=cfg.patch_size, stride=cfg.patch_size, bias=False)
        scale = dim**-0.5
        self.class_embedding = nn.Parameter(scale * torch.randn(dim))
        self.positional_embedding = nn.Parameter(scale * torch.randn(1 + self.grid**2, dim))
        self.ln_pre = nn.LayerNorm(dim)
        self.layers = nn.ModuleList(
            TransformerLayer(dim, cfg.vision_heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers)
        )
        self.ln_post = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, cfg.embed_dim, bias=False)
        nn.init.normal_(self.proj.weight, std=scale)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) images in [0, 1] -> (B, 1 + b, vision_dim) initial tokens [CLS, E]."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[-2:] != (self.input_size, self.input_size):
            raise ValueError(
                f"expected {self.input_size}x{self.input_size} crops, got {tuple(images.shape[-2:])}"
            )
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        x = self.conv1(x).flatten(2).transpose(1, 2)
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1) + self.positional_embedding

    def project_cls(self, cls: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.proj(cls))

    def encode(self, tokens: torch.Tensor, prompts: VisualPromptStack | None = None,
               mode: str = "deep") -> ImageFeatures:
        """Run the layer stack on [CLS, E] tokens.

        ``deep``: layer i sees [CLS, P_i, E]; the prompt-slot outputs are dropped
        and replaced by the next layer's fresh prompts. ``shallow``: prompts are
        inserted once before layer 1 and carried through. ``none``/no prompts:
        plain ViT forward pass.
        """
        x = self.ln_pre(tokens)
        b = x.shape[0]
        n = 0 if prompts is None or mode == "none" else prompts.length
        if n and mode == "deep":
            if prompts.depth != len(self.layers):
                raise ValueError(
                    f"prompt stack depth {prompts.depth} != vision_layers {len(self.layers)}"
                )
            for layer, p in zip(self.layers, prompts.prompts):
                h = layer(torch.cat([x[:, :1], p.expand(b, -1, -1), x[:, 1:]], dim=1))
                x = torch.cat([h[:, :1], h[:, 1 + n:]], dim=1)
        elif n and mode == "shallow":
            x = torch.cat([x[:, :1], prompts.prompts[0].expand(b, -1, -1), x[:, 1:]], dim=1)
            for layer in self.layers:
                x = layer(x)
            x = torch.cat([x[:, :1], x[:, 1 + n:]], dim=1)
        else:
            for layer in self.layers:
                x = layer(x)
        x = self.ln_post(x)
        cls, patches = x[:, 0], x[:, 1:]
        return ImageFeatures(cls=cls, patches=patches, projected_cls=self.project_cls(cls))

    def forward(self, images, prompts=None, mode="deep") -> ImageFeatures:
        return self.encode(self.patchify(images), prompts, mode)
