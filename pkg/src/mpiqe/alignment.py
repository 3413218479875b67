"""Scene alignment on the global CLS feature and distortion alignment on pooled windows.

All functions are batched: image-side inputs carry a leading batch axis.
Similarities are cosine similarities between unit vectors.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import NUM_DISTORTIONS, NUM_SCENES
from .layers import l2_normalize

PROB_FLOOR = 1e-12


def _check_classes(class_emb: torch.Tensor, expected: int, what: str):
    if class_emb.dim() != 2 or class_emb.shape[0] != expected:
        raise ValueError(f"{what} embeddings must have {expected} rows, got {tuple(class_emb.shape)}")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite input to alignment")


def scene_probabilities(z_cls: torch.Tensor, scene_emb: torch.Tensor, temperature: float) -> torch.Tensor:
    """(B, D) image features x (9, D) scene embeddings -> (B, 9) class probabilities."""
    _check_classes(scene_emb, NUM_SCENES, "scene")
    _check_finite(z_cls, scene_emb)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return (z_cls @ scene_emb.T / temperature).softmax(dim=-1)


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p[label] over rows whose label is >= 0; zero if no row is labelled."""
    labels = torch.as_tensor(labels, device=probs.device).long().reshape(-1)
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    if (labels >= probs.shape[-1]).any():
        raise ValueError(f"label out of range [0, {probs.shape[-1]})")
    keep = labels >= 0
    if not keep.any():
        return probs.sum() * 0.0
    picked = probs[keep].gather(1, labels[keep].unsqueeze(1)).squeeze(1)
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def scene_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    # single-label CE; the 1/M prefactor of the literal form is folded into the weights
    return cross_entropy(probs, labels)


def window_pool(patches: torch.Tensor, windows: int) -> torch.Tensor:
    """Max-pool a (B, b, D) patch grid into (B, w*w, D) unit window features, row-major."""
    if patches.dim() == 2:
        return window_pool(patches.unsqueeze(0), windows)[0]
    bsz, b, dim = patches.shape
    side = math.isqrt(b)
    if side * side != b:
        raise ValueError(f"patch count {b} is not a perfect square")
    if side % windows:
        raise ValueError(f"grid side {side} is not divisible by window count {windows}")
    grid = patches.transpose(1, 2).reshape(bsz, dim, side, side)
    pooled = F.max_pool2d(grid, kernel_size=side // windows)
    return l2_normalize(pooled.flatten(2).transpose(1, 2))


def distortion_similarity(windows: torch.Tensor, dist_emb: torch.Tensor, temperature: float,
                          return_weights: bool = False):
    """Spatially weighted similarity of each distortion class to the image windows.

    For every class c the window weights are a softmax over windows of
    sim(P_i, V_c) / temperature; the output is the weighted sum of those
    similarities. Returns (B, 11) and optionally the (B, w*w, 11) weights.
    """
    _check_classes(dist_emb, NUM_DISTORTIONS, "distortion")
    _check_finite(windows, dist_emb)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    squeeze = windows.dim() == 2
    if squeeze:
        windows = windows.unsqueeze(0)
    sims = windows @ dist_emb.T
    weights = (sims / temperature).softmax(dim=1)
    agg = (weights * sims).sum(dim=1)
    if squeeze:
        agg, weights = agg[0], weights[0]
    return (agg, weights) if return_weights else agg


def distortion_probabilities(agg: torch.Tensor, temperature: float) -> torch.Tensor:
    return (agg / temperature).softmax(dim=-1)


def distortion_loss(agg: torch.Tensor, labels, temperature: float) -> torch.Tensor:
    return cross_entropy(distortion_probabilities(agg, temperature), labels)
