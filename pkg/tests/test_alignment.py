import math

import pytest
import torch

from mpiqe.alignment import (cross_entropy, distortion_loss, distortion_similarity, scene_loss,
                             scene_probabilities, window_pool)
from mpiqe.layers import l2_normalize


def unit(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return l2_normalize(torch.randn(*shape, generator=g, dtype=dtype))


def test_scene_probabilities_uniform_when_similarities_equal():
    vs = torch.zeros(9, 4)
    vs[:, 0] = 1.0
    z = torch.tensor([[0.6, 0.8, 0.0, 0.0]])
    probs = scene_probabilities(z, vs, 0.01)
    assert torch.allclose(probs, torch.full((1, 9), 1 / 9), atol=1e-7)


def test_scene_probabilities_sum_to_one():
    probs = scene_probabilities(unit(16, 32), unit(9, 32, seed=1), 0.05)
    assert torch.allclose(probs.sum(-1), torch.ones(16), atol=1e-6)


def test_scene_probabilities_dominant_row():
    vs = torch.eye(9, 16)
    probs = scene_probabilities(vs[3:4], vs, 0.01)
    assert probs.argmax().item() == 3


def test_scene_probabilities_reject_wrong_class_count():
    with pytest.raises(ValueError, match="9 rows"):
        scene_probabilities(unit(2, 8), unit(8, 8), 0.01)
    with pytest.raises(FloatingPointError):
        scene_probabilities(torch.full((1, 8), float("nan")), unit(9, 8), 0.01)


def test_scene_loss_values():
    onehot = torch.zeros(1, 9)
    onehot[0, 2] = 1
    assert scene_loss(onehot, [2]).item() == 0.0
    assert scene_loss(torch.full((1, 9), 1 / 9), [4]).item() == pytest.approx(math.log(9), abs=1e-6)
    assert scene_loss(torch.full((1, 9), 1 / 9), [4]).item() == pytest.approx(2.1972, abs=1e-4)
    floor = scene_loss(onehot, [0]).item()
    assert floor == pytest.approx(-math.log(1e-12), rel=1e-6)
    with pytest.raises(ValueError, match="out of range"):
        scene_loss(onehot, [9])


def test_unlabelled_rows_are_skipped():
    probs = torch.full((2, 9), 1 / 9)
    assert cross_entropy(probs, [-1, 3]).item() == pytest.approx(math.log(9), abs=1e-6)
    assert cross_entropy(probs, [-1, -1]).item() == 0.0


def test_window_pool_blocks():
    patches = torch.randn(2, 36, 8)
    windows = window_pool(patches, 2)
    assert windows.shape == (2, 4, 8)
    grid = patches.reshape(2, 6, 6, 8)
    top_right = grid[:, 0:3, 3:6].amax(dim=(1, 2))
    assert torch.allclose(windows[:, 1], l2_normalize(top_right))


def test_window_pool_identical_patches():
    v = torch.tensor([3.0, -4.0, 0.0])
    windows = window_pool(v.expand(1, 36, 3).clone(), 2)
    assert torch.allclose(windows, (v / 5).expand(1, 4, 3))


def test_window_pool_identity():
    patches = torch.randn(1, 36, 5)
    assert torch.allclose(window_pool(patches, 6), l2_normalize(patches))


def test_window_pool_errors():
    with pytest.raises(ValueError, match="perfect square"):
        window_pool(torch.randn(1, 35, 4), 1)
    with pytest.raises(ValueError, match="divisible"):
        window_pool(torch.randn(1, 36, 4), 4)


def test_spatial_weights_normalised():
    agg, weights = distortion_similarity(unit(5, 4, 16), unit(11, 16, seed=2), 0.1, return_weights=True)
    assert agg.shape == (5, 11) and weights.shape == (5, 4, 11)
    assert torch.allclose(weights.sum(dim=1), torch.ones(5, 11), atol=1e-6)


def test_identical_windows_collapse():
    p = unit(1, 16)
    windows = p.expand(4, 16).unsqueeze(0)
    vd = unit(11, 16, seed=3)
    agg = distortion_similarity(windows, vd, 0.1)
    assert torch.allclose(agg[0], (p @ vd.T)[0], atol=1e-6)


def test_low_temperature_selects_max_window():
    # windows with cosine 0.9 / 0.1 / 0.1 / 0.1 to class 0
    vd = torch.zeros(11, 2)
    vd[:, 0] = 1.0
    angles = torch.tensor([math.acos(0.9)] + [math.acos(0.1)] * 3, dtype=torch.float64)
    windows = torch.stack([angles.cos(), angles.sin()], dim=1).unsqueeze(0)
    agg = distortion_similarity(windows.double(), vd.double(), 1e-3)
    assert agg[0, 0].item() == pytest.approx(0.9, abs=1e-9)


def test_window_order_invariance():
    windows, vd = unit(3, 4, 16, seed=5), unit(11, 16, seed=6)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(distortion_similarity(windows, vd, 0.1), distortion_similarity(windows[:, perm], vd, 0.1),
                          atol=1e-6)


def test_similarity_bounds():
    agg = distortion_similarity(unit(50, 4, 8, seed=7), unit(11, 8, seed=8), 0.05)
    assert agg.abs().max() <= 1 + 1e-6


def test_distortion_loss_values():
    dominant = torch.full((1, 11), -1.0)
    dominant[0, 6] = 1.0
    assert distortion_loss(dominant, [6], 0.01).item() < 1e-6
    assert distortion_loss(torch.full((1, 11), 0.3), [1], 0.01).item() == pytest.approx(math.log(11), abs=1e-5)
    assert math.log(11) == pytest.approx(2.3979, abs=1e-4)
    with pytest.raises(ValueError, match="out of range"):
        distortion_loss(dominant, [11], 0.01)


def test_losses_nonnegative():
    probs = scene_probabilities(unit(20, 8), unit(9, 8, seed=9), 0.1)
    labels = torch.randint(0, 9, (20,), generator=torch.Generator().manual_seed(0))
    assert scene_loss(probs, labels).item() >= 0


def _window_loss(windows, vd, labels):
    agg = distortion_similarity(l2_normalize(windows), vd, 0.1)
    return distortion_loss(agg, labels, 0.5)


@pytest.mark.parametrize("dtype, tol", [(torch.float32, 1e-3), (torch.float64, 1e-5)])
def test_distortion_loss_gradient(dtype, tol):
    h = 1e-6  # the finite-difference oracle always runs in float64
    windows = torch.randn(2, 4, 8, dtype=dtype, generator=torch.Generator().manual_seed(10)).requires_grad_()
    vd = unit(11, 8, seed=11, dtype=dtype)
    labels = torch.tensor([3, 7])
    _window_loss(windows, vd, labels).backward()
    # directional derivative against a float64 central difference
    direction = torch.randn(windows.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(12))
    w64 = windows.detach().double()
    with torch.no_grad():
        up = _window_loss(w64 + h * direction, vd.double(), labels).item()
        down = _window_loss(w64 - h * direction, vd.double(), labels).item()
    fd = (up - down) / (2 * h)
    analytic = (windows.grad.double() * direction).sum().item()
    assert abs(analytic - fd) <= tol * abs(fd)
