import pytest
import torch

from mpiqe.config import desk_config, full_scale_config
from mpiqe.layers import NonFiniteError
from mpiqe.model import build_model
from mpiqe.vision import VisionEncoder, VisualPromptStack


def test_patchify_counts(model, crops):
    tokens = model.vision.patchify(crops)
    assert tokens.shape == (3, 1 + 36, 96)


def test_patchify_vit_b16_arithmetic():
    cfg = full_scale_config()
    assert cfg.num_patches == 196
    enc = VisionEncoder(desk_config(crop_size=64, patch_size=16, window_count=2, image_size=64))
    assert enc.patchify(torch.rand(1, 3, 64, 64)).shape[1] == 1 + 16


def test_patchify_validation(model):
    with pytest.raises(ValueError, match="crops"):
        model.vision.patchify(torch.rand(1, 3, 40, 40))
    with pytest.raises(ValueError, match="expected"):
        model.vision.patchify(torch.rand(1, 4, 48, 48))


def test_patchify_deterministic(model, crops):
    both = torch.cat([crops[:1], crops[:1]])
    tokens = model.vision.patchify(both)
    assert torch.equal(tokens[0], tokens[1])


def test_prompt_discard_exact(model, crops):
    """Whatever a layer writes into the prompt slots never reaches later layers."""
    n = model.cfg.visual_prompt_len
    ref = model.vision(crops, model.visual_prompts, "deep")

    def scramble(module, args, output):
        out = output.clone()
        out[:, 1:1 + n] = torch.randn_like(out[:, 1:1 + n]) * 1e3
        return out

    handles = [layer.register_forward_hook(scramble) for layer in model.vision.layers]
    try:
        got = model.vision(crops, model.visual_prompts, "deep")
    finally:
        for h in handles:
            h.remove()
    assert torch.equal(ref.cls, got.cls)
    assert torch.equal(ref.patches, got.patches)


def test_no_prompts_is_plain_vit(model, crops):
    plain = model.vision(crops, None, "none")
    empty = VisualPromptStack(model.cfg.vision_layers, 0, model.cfg.vision_dim)
    assert torch.equal(plain.cls, model.vision(crops, empty, "deep").cls)
    x = model.vision.ln_pre(model.vision.patchify(crops))
    for layer in model.vision.layers:
        x = layer(x)
    assert torch.equal(model.vision.ln_post(x)[:, 0], plain.cls)


def _layer_outputs(model, crops):
    outs = []
    handles = [layer.register_forward_hook(lambda m, a, o: outs.append(o.detach().clone()))
               for layer in model.vision.layers]
    model.vision(crops, model.visual_prompts, "deep")
    for h in handles:
        h.remove()
    return outs


def test_prompt_perturbation_is_causal(model, crops):
    before = _layer_outputs(model, crops)
    with torch.no_grad():
        model.visual_prompts.prompts[2] += 0.5  # prompts entering layer 3
    after = _layer_outputs(model, crops)
    assert torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])
    assert not torch.equal(before[2], after[2]) and not torch.equal(before[3], after[3])


def test_attention_spans_cls_prompts_patches(model, crops):
    lengths = []
    handles = [layer.attn.register_forward_hook(lambda m, a, o: lengths.append(a[0].shape[1]))
               for layer in model.vision.layers]
    model.vision(crops, model.visual_prompts, "deep")
    for h in handles:
        h.remove()
    cfg = model.cfg
    assert lengths == [1 + cfg.visual_prompt_len + cfg.num_patches] * cfg.vision_layers


def test_depth_mismatch(model, crops):
    bad = VisualPromptStack(2, 4, model.cfg.vision_dim)
    with pytest.raises(ValueError, match="depth"):
        model.vision(crops, bad, "deep")


def test_shallow_mode_propagates_prompts(crops):
    model = build_model(desk_config(visual_prompt_mode="shallow"))
    assert model.visual_prompts.depth == 1
    lengths = []
    handles = [layer.register_forward_hook(lambda m, a, o: lengths.append(o.shape[1]))
               for layer in model.vision.layers]
    model.vision(crops, model.visual_prompts, "shallow")
    for h in handles:
        h.remove()
    assert lengths == [1 + 4 + 36] * 4


def test_project_cls(model):
    z = model.vision.project_cls(torch.randn(5, 96))
    assert torch.allclose(z.norm(dim=1), torch.ones(5), atol=1e-6)
    with pytest.raises(NonFiniteError, match="non-finite normalization"):
        model.vision.project_cls(torch.zeros(1, 96))
    assert full_scale_config().vision_dim == 768 and full_scale_config().embed_dim == 512


def test_prompt_gradient_every_layer():
    model = build_model(desk_config()).double()
    crops = torch.rand(2, 3, 48, 48, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    w = torch.randn(2, 36, 96, dtype=torch.float64, generator=torch.Generator().manual_seed(4))

    def f():
        feats = model.vision(crops, model.visual_prompts, "deep")
        return (feats.patches * w).sum() + feats.cls.sum()

    prompts = model.visual_prompts.prompts
    prompts.grad = None
    f().backward()
    h = 1e-6
    for layer in range(model.cfg.vision_layers):
        idx = (layer, 1, 5)
        with torch.no_grad():
            prompts[idx] += h
            up = f().item()
            prompts[idx] -= 2 * h
            down = f().item()
            prompts[idx] += h
        fd = (up - down) / (2 * h)
        assert fd != 0
        assert abs(fd - prompts.grad[idx].item()) <= 1e-5 * abs(fd)
