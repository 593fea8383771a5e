import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from segin.errors import DimensionError, InputError
from segin.features import FeatureExtractorConfig, apply_extractor
from segin.losses import (LossReport, LossWeights, feature_loss, gan_loss_d, gan_loss_g, recon_loss,
                          seg_att_loss, seg_loss, total_loss, tv_loss)

POOL2 = FeatureExtractorConfig(kind="color-pool", downsample_factor=2)
TOY = FeatureExtractorConfig(kind="toy-conv", seed=3)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_recon_examples():
    y = t(np.random.default_rng(0).random((1, 3, 4, 4)))
    assert float(recon_loss(y, y)) == 0
    assert float(recon_loss(y + 0.5, y)) == pytest.approx(0.5)
    assert float(recon_loss(t([0.0, 1.0]), t([1.0, 0.0]))) == 1.0
    with pytest.raises(DimensionError):
        recon_loss(y, y[..., :2])


def test_feature_loss_examples():
    rng = np.random.default_rng(1)
    a, b = t(rng.random((1, 3, 8, 8))), t(rng.random((1, 3, 8, 8)))
    assert float(feature_loss(a, a, TOY)) == 0
    pooled = recon_loss(torch.nn.functional.avg_pool2d(a, 2), torch.nn.functional.avg_pool2d(b, 2))
    assert float(feature_loss(a, b, POOL2)) == pytest.approx(float(pooled), rel=1e-12)
    # independent recompute through the extractor module and numpy
    fa = apply_extractor(a, TOY).numpy()
    fb = apply_extractor(b, TOY).numpy()
    assert float(feature_loss(a, b, TOY)) == pytest.approx(np.abs(fa - fb).mean(), rel=1e-10)


def test_gan_d_examples():
    half = t([0.5, 0.5])
    assert float(gan_loss_d(half, half)) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(gan_loss_d(half, half, labels_flipped=True)) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(gan_loss_d(t([1.0]), t([0.0]))) == pytest.approx(2e-7, rel=1e-3)
    with pytest.raises(FloatingPointError):
        gan_loss_d(t([1.5]), half)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=6), st.lists(st.floats(0.001, 0.999), min_size=1, max_size=6))
def test_gan_d_flip_symmetry(a, b):
    a, b = t(a), t(b)
    assert float(gan_loss_d(a, b, True)) == pytest.approx(float(gan_loss_d(1 - a, 1 - b, False)), rel=1e-12)


def test_gan_g_examples():
    assert float(gan_loss_g(t([1.0]))) == pytest.approx(1e-7, rel=1e-3)
    assert float(gan_loss_g(t([0.5]))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(gan_loss_g(t([math.exp(-1)]))) == pytest.approx(1.0, abs=1e-12)


def test_tv_examples():
    assert float(tv_loss(torch.full((1, 3, 5, 5), 0.3, dtype=torch.float64))) == 0
    assert float(tv_loss(t([[0.0, 1.0], [0.0, 1.0]]))) == pytest.approx(0.5)
    y = t(np.random.default_rng(2).random((2, 3, 6, 5)))
    assert float(tv_loss(y + 0.25)) == pytest.approx(float(tv_loss(y)), rel=1e-12)


def test_tv_matches_loop():
    y = np.random.default_rng(3).random((3, 4, 5))
    total = 0.0
    for ch in range(3):
        for i in range(4):
            for j in range(5):
                h = y[ch, i + 1, j] - y[ch, i, j] if i + 1 < 4 else 0.0
                v = y[ch, i, j + 1] - y[ch, i, j] if j + 1 < 5 else 0.0
                total += math.sqrt(h * h + v * v)
    assert float(tv_loss(t(y))) == pytest.approx(total / 20, rel=1e-12)


def test_tv_zero_gradient_at_flat():
    y = torch.zeros(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    tv_loss(y).backward()
    assert torch.equal(y.grad, torch.zeros_like(y))


def test_seg_examples():
    ones, zeros = torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)
    assert float(seg_loss(ones, ones)) == 0
    assert float(seg_loss(ones, zeros)) == 1
    assert float(seg_loss(torch.full_like(ones, 0.25), ones)) == 0.75


def test_seg_att_examples():
    rng = np.random.default_rng(4)
    y = t(rng.random((1, 3, 4, 4)))
    yh = t(rng.random((1, 3, 4, 4)))
    m = t((rng.random((1, 1, 4, 4)) > 0.5).astype(float))
    assert float(seg_att_loss(m, y, m, y)) == 0
    z = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert float(seg_att_loss(z, yh, z, y)) == 0
    one = torch.ones_like(z)
    assert float(seg_att_loss(one, y + 0.2, one, y)) == pytest.approx(0.2)


def test_total_examples():
    comps = dict(recon=1, feature=1, gan_g=1, seg=1, seg_att=1, tv=1)
    assert total_loss(dict.fromkeys(comps, 0.0)) == 0
    assert abs(total_loss(comps) - 221.000005) < 1e-9
    zero = LossWeights(0, 0, 0, 0, 0, 0)
    assert total_loss(comps, zero) == 0
    assert total_loss(LossReport(1, 1, 1, 99, 1, 1, 1), LossWeights()) == pytest.approx(221.000005)
    with pytest.raises(FloatingPointError):
        total_loss({**comps, "tv": float("nan")})
    with pytest.raises(InputError):
        LossWeights(recon=-1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_total_linear_in_weight(a, b):
    comps = dict(recon=0.3, feature=2.0, gan_g=0.7, seg=0.1, seg_att=0.05, tv=0.4)
    w = LossWeights()
    fa = total_loss(comps, w.replace(tv=a))
    fb = total_loss(comps, w.replace(tv=b))
    assert fb - fa == pytest.approx(0.4 * (b - a), abs=1e-9)


# gradient checks --------------------------------------------------------------------

def max_rel_err(analytic, numeric, floor=1e-6):
    # floor keeps exactly-cancelling gradients (0 vs 1e-12 rounding) from counting as errors
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(fn, *inputs, wrt=0):
    """Relative error between autograd and central differences for input ``wrt``."""
    xs = [torch.as_tensor(np.asarray(v, np.float64)) for v in inputs]
    xs[wrt].requires_grad_(True)
    fn(*xs).backward()
    analytic = xs[wrt].grad.numpy()

    def f(arr):
        args = [x.detach() for x in xs]
        args[wrt] = torch.as_tensor(arr)
        return float(fn(*args))

    numeric = oracles.central_difference(f, xs[wrt].detach().numpy(), 1e-4)
    return max_rel_err(analytic, numeric)


def separated_pair(rng, shape, gap=1e-2):
    """Two tensors whose elementwise differences stay clear of the |.| kink."""
    a = rng.random(shape)
    d = rng.uniform(gap, 0.3, shape) * rng.choice([-1, 1], shape)
    return a, a + d


def gradcase(name, rng):
    shape = (1, 3, 4, 4)
    if name == "recon":
        a, b = separated_pair(rng, shape)
        return recon_loss, (a, b)
    if name == "feature":
        a, b = rng.random(shape), rng.random(shape)
        return (lambda p, q: feature_loss(p, q, TOY)), (a, b)
    if name == "gan":
        return (lambda p, q: gan_loss_d(p, q, False) + gan_loss_g(q)), (rng.uniform(0.05, 0.95, (1, 1, 4, 4)),
                                                                       rng.uniform(0.05, 0.95, (1, 1, 4, 4)))
    if name == "tv":
        # |diff| near zero is a kink of the boundary terms; redraw until clear of it
        while True:
            y = rng.random(shape) + 1e-3 * rng.normal(size=shape)
            if min(np.abs(np.diff(y, axis=2)).min(), np.abs(np.diff(y, axis=3)).min()) > 1e-3:
                return tv_loss, (y,)
    if name == "seg":
        a, b = separated_pair(rng, (1, 1, 4, 4))
        return seg_loss, (a, b)
    if name == "seg_att":
        s, ys = rng.uniform(0.1, 0.9, (1, 1, 4, 4)), (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        y = rng.random(shape)
        yh = y + rng.uniform(0.05, 0.3, shape) * rng.choice([-1, 1], shape)
        return seg_att_loss, (s, yh, ys, y)
    raise KeyError(name)


LOSS_NAMES = ["recon", "feature", "gan", "tv", "seg", "seg_att"]


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_finite_difference_gradients(name):
    for seed in range(10):
        fn, args = gradcase(name, np.random.default_rng(seed))
        # every differentiable tensor argument that the generator side produces
        targets = [0, 1] if name in ("gan", "seg_att") else [0]
        for wrt in targets:
            assert grad_check(fn, *args, wrt=wrt) < 1e-4, (name, seed, wrt)
