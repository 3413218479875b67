"""The full quality evaluator: frozen dual encoder plus the learnable prompt/fusion parts."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import distortion_similarity, scene_probabilities, window_pool
from .config import (NUM_DISTORTIONS, NUM_SCENES, ModelConfig, distortion_taxonomy,
                     scene_taxonomy)
from .head import MultiModalEncoder, ScoreHead, build_query
from .text import PromptContext, TextEncoder, Tokenizer
from .vision import VisionEncoder, VisualPromptStack


@dataclass
class ModelOutput:
    score: torch.Tensor  # (B,)
    scene_probs: torch.Tensor | None  # (B, 9)
    dist_agg: torch.Tensor | None  # (B, 11)
    spatial_weights: torch.Tensor | None  # (B, w*w, 11)
    scene_emb: torch.Tensor | None
    dist_emb: torch.Tensor | None
    z_cls: torch.Tensor
    patches: torch.Tensor  # (B, b, embed_dim)


class MPIQE(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.cfg = cfg
        self.pretrained = False
        self.scene_tax = scene_taxonomy()
        self.dist_tax = distortion_taxonomy()
        self.text = TextEncoder(cfg, tokenizer)
        self.vision = VisionEncoder(cfg)

        self.scene_ctx = PromptContext(cfg.text_prompt_len, cfg.embed_dim, "scene") if cfg.use_scene_prompts else None
        self.distortion_ctx = (PromptContext(cfg.text_prompt_len, cfg.embed_dim, "distortion")
                               if cfg.use_distortion_prompts else None)
        self.visual_prompts = None
        if cfg.visual_prompt_mode != "none" and cfg.visual_prompt_len > 0:
            depth = cfg.vision_layers if cfg.visual_prompt_mode == "deep" else 1
            self.visual_prompts = VisualPromptStack(depth, cfg.visual_prompt_len, cfg.vision_dim)
        self.patch_proj = nn.Linear(cfg.vision_dim, cfg.embed_dim)
        num_queries = NUM_SCENES * cfg.use_scene_prompts + NUM_DISTORTIONS * cfg.use_distortion_prompts
        self.decoder = MultiModalEncoder(cfg.embed_dim, cfg.decoder_heads, cfg.decoder_layers)
        self.head = ScoreHead(cfg.embed_dim, num_queries, cfg.score_pooling)
        apply_freeze(self)

    def class_embeddings(self):
        scene = self.text.encode_taxonomy(self.scene_ctx, self.scene_tax) if self.scene_ctx is not None else None
        dist = (self.text.encode_taxonomy(self.distortion_ctx, self.dist_tax)
                if self.distortion_ctx is not None else None)
        return scene, dist

    def encode_image(self, images: torch.Tensor):
        feats = self.vision(images, self.visual_prompts, self.cfg.visual_prompt_mode)
        return feats.projected_cls, self.patch_proj(feats.patches)

    def forward(self, images: torch.Tensor) -> ModelOutput:
        cfg = self.cfg
        scene_emb, dist_emb = self.class_embeddings()
        z_cls, patches = self.encode_image(images)
        scene_probs = dist_agg = weights = None
        if scene_emb is not None:
            scene_probs = scene_probabilities(z_cls, scene_emb, cfg.temp_global)
        if dist_emb is not None:
            windows = window_pool(patches, cfg.window_count)
            dist_agg, weights = distortion_similarity(windows, dist_emb, cfg.temp_spatial, return_weights=True)
        query = build_query(scene_emb, dist_emb)
        image_tokens = torch.cat([z_cls.unsqueeze(1), patches], dim=1)
        score = self.head(self.decoder(query, image_tokens))
        return ModelOutput(score, scene_probs, dist_agg, weights, scene_emb, dist_emb, z_cls, patches)

    @torch.no_grad()
    def zero_shot_labels(self, images: torch.Tensor, batch: int = 64):
        """Scene/distortion pseudo-labels from the frozen backbone and handcrafted prompts."""
        scene_emb = self.text.encode_handcrafted(self.scene_tax)
        dist_emb = self.text.encode_handcrafted(self.dist_tax)
        scenes, dists = [], []
        for start in range(0, images.shape[0], batch):
            feats = self.vision(images[start:start + batch], None, "none")
            z = feats.projected_cls
            scenes.append((z @ scene_emb.T).argmax(-1))
            windows = window_pool(self.patch_proj(feats.patches), self.cfg.window_count)
            agg = distortion_similarity(windows, dist_emb, self.cfg.temp_spatial)
            dists.append(agg.argmax(-1))
        return torch.cat(scenes), torch.cat(dists)


def trainable_parameters(model: MPIQE) -> dict[str, list[nn.Parameter]]:
    """Named groups of the parameters that training may update.

    The backbone projections are trainable only while the backbone is randomly
    initialised; once pretrained weights are loaded they stay frozen.
    """
    groups: dict[str, list[nn.Parameter]] = {}
    if model.scene_ctx is not None:
        groups["scene_prompts"] = [model.scene_ctx.vectors]
    if model.distortion_ctx is not None:
        groups["distortion_prompts"] = [model.distortion_ctx.vectors]
    if model.visual_prompts is not None:
        groups["visual_prompts"] = [model.visual_prompts.prompts]
    groups["patch_projection"] = list(model.patch_proj.parameters())
    groups["decoder"] = list(model.decoder.parameters())
    groups["score_head"] = list(model.head.parameters())
    if not model.pretrained:
        groups["image_projection"] = list(model.vision.proj.parameters())
        groups["text_projection"] = list(model.text.text_projection.parameters())
    return groups


def apply_freeze(model: MPIQE) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    for params in trainable_parameters(model).values():
        for p in params:
            p.requires_grad_(True)


def frozen_parameter_names(model: MPIQE) -> list[str]:
    return [name for name, p in model.named_parameters() if not p.requires_grad]


def build_model(cfg: ModelConfig, tokenizer: Tokenizer | None = None) -> MPIQE:
    """Construct a model with weights drawn from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    return MPIQE(cfg, tokenizer)
