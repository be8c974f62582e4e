import math

import pytest
import torch

from conftest import TOY, grad_check, toy_context
from movesynth.errors import ConfigError, ShapeError
from movesynth.losses import (FeatureExtractor, LossContext, LossWeights, discriminator_logits,
                              discriminator_sequence_loss, init_discriminator, l1_move_loss,
                              move_loss, perceptual_move_loss, sequence_loss,
                              temporal_gan_loss_d, temporal_gan_loss_g)
from movesynth.sampling import move_index_pairs

D64 = torch.float64
H, W = TOY.height, TOY.width


def _frames(seed, n=2):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(1, 3, H, W, generator=g, dtype=D64) for _ in range(n)]


def _flow(seed):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(1, 2, H, W, generator=g, dtype=D64) - 0.5) * 3


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(l1=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(0.0, 0.0, 0.0)
    assert LossWeights().without_temporal().temporal == 0.0


def test_l1_ones_vs_zeros_is_two():
    ones = [torch.ones(1, 3, 4, 4)] * 2
    zeros = [torch.zeros(1, 3, 4, 4)] * 2
    assert float(l1_move_loss(ones, zeros)) == 2.0


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        l1_move_loss([torch.zeros(1, 3, 4, 4)], [torch.zeros(1, 3, 4, 5)])


def test_perceptual_zero_on_identical_and_monotone_in_noise():
    fx = FeatureExtractor(dtype=D64)
    x = _frames(1)
    noise = [torch.randn(f.shape, generator=torch.Generator().manual_seed(2), dtype=D64) for f in x]
    assert float(perceptual_move_loss(x, x, fx)) == 0.0
    vals = [float(perceptual_move_loss([f + e * n for f, n in zip(x, noise)], x, fx))
            for e in (0.05, 0.1, 0.2)]
    assert vals[0] < vals[1] < vals[2]


def test_extractor_deterministic_and_frozen():
    a, b = FeatureExtractor(), FeatureExtractor()
    sa, sb = a.state(), b.state()
    assert list(sa) == list(sb) and all((sa[k] == sb[k]).all() for k in sa)
    assert not any(v.requires_grad for v in a._w.values())


def test_extractor_save_load(tmp_path):
    fx = FeatureExtractor(seed=5)
    fx.save(tmp_path / "fx.npz")
    back = FeatureExtractor.load(tmp_path / "fx.npz")
    x = _frames(3)[0].float()
    assert all(torch.equal(p, q) for p, q in zip(fx.features(x), back.features(x)))


def test_zero_head_discriminator_gives_log2_losses():
    D = init_discriminator(0, 8, D64)
    pred, real, fl = _frames(4), _frames(5), _flow(6)
    assert abs(float(temporal_gan_loss_g(pred, fl, D)) - math.log(2)) < 1e-12
    assert abs(float(temporal_gan_loss_d(real, pred, fl, D)) - 2 * math.log(2)) < 1e-12


def test_discriminator_rejects_mismatched_flow():
    D = init_discriminator(0, 8, D64)
    a, b = _frames(7)
    with pytest.raises(ShapeError):
        discriminator_logits(a, b, torch.zeros(1, 2, H, W + 1, dtype=D64), D)


def test_move_loss_linear_in_weights():
    ctx = toy_context(8)
    pred, truth, fl = _frames(8), _frames(9), _flow(10)
    parts = [float(move_loss(pred, truth, fl, ctx.fx, ctx.D, w))
             for w in (LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1))]
    whole = float(move_loss(pred, truth, fl, ctx.fx, ctx.D, LossWeights(0.5, 2.0, 0.3)))
    assert abs(whole - (0.5 * parts[0] + 2.0 * parts[1] + 0.3 * parts[2])) < 1e-10


def _sequence_reference(pred, truth, flows, ctx, w):
    total = 0.0
    for a, b in move_index_pairs(len(pred)):
        total += float(move_loss((pred[a], pred[b]), (truth[a], truth[b]), flows[a], ctx.fx, ctx.D, w))
    return total


@pytest.mark.parametrize("n", [2, 3, 4, 7])
def test_sequence_loss_is_sum_of_move_losses(n):
    ctx = toy_context(11)
    pred, truth = _frames(12, n), _frames(13, n)
    flows = [_flow(20 + i) for i in range(n - 1)]
    got = float(sequence_loss(pred, truth, flows, ctx))
    assert abs(got - _sequence_reference(pred, truth, flows, ctx, ctx.weights)) < 1e-10


def test_frame_mode_is_per_frame_sum_without_temporal():
    ctx = toy_context(14)
    pred, truth = _frames(15, 5), _frames(16, 5)
    w = ctx.weights
    ref = sum(w.l1 * float((p - t).abs().mean())
              + w.perceptual * float(perceptual_move_loss([p], [t], ctx.fx))
              for p, t in zip(pred, truth))
    assert abs(float(sequence_loss(pred, truth, None, ctx, mode="frame")) - ref) < 1e-10


def test_temporal_term_needs_discriminator():
    ctx = LossContext(FeatureExtractor(dtype=D64), None, LossWeights())
    with pytest.raises(ConfigError):
        sequence_loss(_frames(17), _frames(18), [_flow(19)], ctx)
    sequence_loss(_frames(17), _frames(18), None, ctx.with_weights(LossWeights(temporal=0.0)))


def test_discriminator_loss_detaches_fakes():
    ctx = toy_context(20)
    pred = [f.requires_grad_(True) for f in _frames(21, 4)]
    loss = discriminator_sequence_loss(pred, _frames(22, 4), [_flow(23 + i) for i in range(3)], ctx.D)
    assert not loss.requires_grad or all(
        g is None for g in torch.autograd.grad(loss, pred, allow_unused=True))


# -- finite-difference checks


def test_l1_gradient():
    # |x| is only differentiable away from 0: keep every residual well beyond the step size
    truth = _frames(30)
    g = torch.Generator().manual_seed(31)
    pred = []
    for t in truth:
        sign = torch.where(torch.rand(t.shape, generator=g) < 0.5, -1.0, 1.0).to(D64)
        pred.append(t + sign * (0.05 + 0.2 * torch.rand(t.shape, generator=g, dtype=D64)))
    assert grad_check(lambda a, b: l1_move_loss([a, b], truth), pred, seed=30) < 1e-3


def test_perceptual_gradient():
    # feature residuals pass through |.|: a small step keeps kink crossings negligible
    fx = FeatureExtractor(dtype=D64)
    truth = _frames(32)
    assert grad_check(lambda a, b: perceptual_move_loss([a, b], truth, fx), _frames(33), seed=32,
                      h=1e-6) < 1e-3


def test_generator_gan_gradient_wrt_frames_and_discriminator():
    ctx = toy_context(34)
    fl = _flow(34)
    keys = list(ctx.D)

    def f(a, b, *ds):
        return temporal_gan_loss_g([a, b], fl, dict(zip(keys, ds)))
    assert grad_check(f, _frames(35) + [ctx.D[k] for k in keys], seed=34) < 1e-3


def test_discriminator_gan_gradient():
    ctx = toy_context(36)
    fl, real, fake = _flow(36), _frames(37), _frames(38)
    keys = list(ctx.D)
    f = lambda *ds: temporal_gan_loss_d(real, fake, fl, dict(zip(keys, ds)))
    assert grad_check(f, [ctx.D[k] for k in keys], seed=36) < 1e-3


def test_sequence_loss_gradient():
    ctx = toy_context(39)
    truth = _frames(40, 5)
    flows = [_flow(41 + i) for i in range(4)]
    f = lambda *p: sequence_loss(list(p), truth, flows, ctx)
    assert grad_check(f, _frames(46, 5), seed=39, h=1e-6) < 1e-3
