import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import TOY, grad_check, toy_params
from movesynth.errors import ConfigError, ShapeError
from movesynth.metrics import warp_np
from movesynth.model import (FeatureCache, ModelConfig, TDGNParams, apply_modulation, decode,
                             extract_image_features, extract_pose_features, init_params,
                             instance_norm, modulate, modulation_maps, predict_flow,
                             predict_occlusion, synthesize_frame, synthesize_move,
                             synthesize_sequence, synthesize_sequence_stepwise, upsample, warp)

D64 = torch.float64


def _g(seed=0):
    return torch.Generator().manual_seed(seed)


def _img(g, cfg=TOY, c=3, b=1):
    return torch.rand(b, c, cfg.height, cfg.width, generator=g, dtype=D64)


def _pyr(g, cfg=TOY, mult=1):
    return [torch.randn(1, mult * cfg.channels(l), cfg.height // 2 ** l, cfg.width // 2 ** l,
                        generator=g, dtype=D64) for l in range(1, cfg.levels + 1)]


# -- configuration and parameters


def test_resolution_must_divide():
    with pytest.raises(ConfigError):
        ModelConfig(levels=3, height=60, width=32)


def test_pyramid_sizes_default():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    r = extract_pose_features(torch.zeros(1, cfg.pose_channels, 64, 32), p, cfg)
    assert [tuple(x.shape[-2:]) for x in r] == [(32, 16), (16, 8), (8, 4)]
    assert [x.shape[1] for x in r] == [16, 32, 64]


def test_encoders_pure_and_finite_on_zero_input():
    p = init_params(TOY, 0, D64)
    z = torch.zeros(1, TOY.pose_channels, TOY.height, TOY.width, dtype=D64)
    a, b = extract_pose_features(z, p, TOY), extract_pose_features(z, p, TOY)
    assert all(torch.equal(x, y) and torch.isfinite(x).all() for x, y in zip(a, b))
    zi = torch.zeros(1, 3, TOY.height, TOY.width, dtype=D64)
    a, b = extract_image_features(zi, p, TOY), extract_image_features(zi, p, TOY)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_encoder_rejects_wrong_channels():
    p = init_params(TOY, 0, D64)
    with pytest.raises(ShapeError):
        extract_pose_features(torch.zeros(1, 3, TOY.height, TOY.width, dtype=D64), p, TOY)


def test_param_arithmetic_and_deep_clone():
    p = init_params(TOY, 0, D64)
    zero = TDGNParams((k, torch.zeros_like(v)) for k, v in p.items())
    assert (p.add(zero)).equal(p) and p.scale(1.0).equal(p)
    c = p.clone()
    next(iter(c.values())).add_(1.0)
    k0 = next(iter(p))
    assert not torch.equal(c[k0], p[k0])


def test_init_deterministic():
    a, b = init_params(TOY, 3), init_params(TOY, 3)
    assert all(torch.equal(a[k], b[k]) for k in a)


# -- warping


def test_zero_flow_warp_is_identity_bit_exact():
    img = _img(_g(1))
    out = warp(img, torch.zeros(1, 2, TOY.height, TOY.width, dtype=D64))
    assert torch.equal(out, img)


def test_integer_flow_shifts_single_pixel():
    img = torch.zeros(1, 3, 8, 16, dtype=D64)
    img[..., 3, 5] = 1.0
    flow = torch.zeros(1, 2, 8, 16, dtype=D64)
    flow[:, 0] = 1.0  # out(x) = img(x + 1): content moves one column left
    out = warp(img, flow)
    assert out[0, 0, 3, 4] == 1.0 and out.sum() == 3.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_torch_warp_matches_numpy_warp(seed):
    g = _g(seed)
    img = _img(g)
    flow = (torch.rand(1, 2, TOY.height, TOY.width, generator=g, dtype=D64) - 0.5) * 10
    a = warp(img, flow)[0].numpy().transpose(1, 2, 0)
    b = warp_np(img[0].numpy().transpose(1, 2, 0), flow[0].numpy().transpose(1, 2, 0))
    assert np.abs(a - b).max() < 1e-12


def test_warp_gradcheck():
    g = _g(2)
    img = _img(g).requires_grad_(True)
    flow = ((torch.rand(1, 2, TOY.height, TOY.width, generator=g, dtype=D64) - 0.5) * 4 + 0.3)
    flow.requires_grad_(True)
    assert torch.autograd.gradcheck(warp, (img, flow), eps=1e-6, atol=1e-5)


# -- flow network


def test_identical_pyramids_zero_heads_zero_flow():
    p = init_params(TOY, 0, D64)  # zero-initialized flow heads
    r = _pyr(_g(3))
    assert torch.equal(predict_flow(r, r, p, TOY), torch.zeros(1, 2, TOY.height, TOY.width, dtype=D64))


def test_upsample_scale_law():
    flow = torch.full((1, 2, 2, 4), 0.0, dtype=D64)
    flow[:, 0], flow[:, 1] = 0.75, -1.5
    up = 2.0 * upsample(flow)
    assert torch.allclose(up[:, 0], torch.full_like(up[:, 0], 1.5))
    assert torch.allclose(up[:, 1], torch.full_like(up[:, 1], -3.0))


def test_flow_network_gradient_of_warped_l1():
    p = toy_params(4)
    g = _g(4)
    ra, rb, img, tgt = _pyr(g), _pyr(g), _img(g), _img(g)
    keys = list(p.group("fn"))

    def f(*ws):
        q = TDGNParams(p)
        q.update(zip(keys, ws))
        return (warp(img, predict_flow(ra, rb, q, TOY)) - tgt).abs().mean()
    assert grad_check(f, [p[k] for k in keys], seed=4) < 1e-3


# -- modulation


def test_zero_heads_give_plain_normalized_features():
    p = init_params(TOY, 0, D64)
    g = _g(5)
    ri, rprev, rp, rpp = _pyr(g), _pyr(g), _pyr(g), _pyr(g)
    out = modulate(ri, rprev, rp, rpp, p, TOY)
    for o, a, b in zip(out, ri, rprev):
        assert torch.allclose(o, instance_norm(torch.cat([a, b], 1)), atol=1e-12)


def test_normalization_scale_invariance():
    g = _g(6)
    x = torch.randn(1, 8, 4, 8, generator=g, dtype=D64)
    assert torch.allclose(instance_norm(x), instance_norm(3.7 * x), atol=1e-6)


def test_modulation_gradient():
    p = toy_params(7)
    g = _g(7)
    ri, rprev, rp, rpp = _pyr(g), _pyr(g), _pyr(g), _pyr(g)
    keys = list(p.group("mn"))
    w = [torch.randn(o.shape, generator=g, dtype=D64)
         for o in modulate(ri, rprev, rp, rpp, p, TOY)]

    def f(*ws):
        q = TDGNParams(p)
        q.update(zip(keys, ws))
        return sum((o * wi).sum() for o, wi in zip(modulate(ri, rprev, rp, rpp, q, TOY), w))
    assert grad_check(f, [p[k] for k in keys], seed=7) < 1e-3


# -- decoder and occlusion


def test_decoder_range_and_purity():
    p = toy_params(8)
    r = _pyr(_g(8), mult=2)
    a, b = decode(r, p, TOY), decode(r, p, TOY)
    assert a.shape == (1, 3, TOY.height, TOY.width)
    assert torch.equal(a, b) and a.min() >= 0 and a.max() <= 1


def test_decoder_gradient():
    p = toy_params(9)
    g = _g(9)
    r = _pyr(g, mult=2)
    tgt = _img(g)
    keys = list(p.group("decoder"))

    def f(*args):
        q = TDGNParams(p)
        q.update(zip(keys, args[:len(keys)]))
        return ((decode(list(args[len(keys):]), q, TOY) - tgt) ** 2).mean()
    assert grad_check(f, [p[k] for k in keys] + r, seed=9) < 1e-3


def test_occlusion_range_and_asymmetry():
    p = toy_params(10)
    g = _g(10)
    w, r = _img(g), _img(g)
    m = predict_occlusion(w, r, p, TOY)
    assert m.shape == (1, 1, TOY.height, TOY.width)
    assert (m > 0).all() and (m < 1).all()
    assert not torch.equal(m, predict_occlusion(r, w, p, TOY))


def test_occlusion_gradient():
    p = toy_params(11)
    g = _g(11)
    w, r, tgt = _img(g), _img(g), torch.rand(1, 1, TOY.height, TOY.width, generator=g, dtype=D64)
    keys = list(p.group("wn"))

    def f(*args):
        q = TDGNParams(p)
        q.update(zip(keys, args[:len(keys)]))
        return ((predict_occlusion(args[-2], args[-1], q, TOY) - tgt) ** 2).mean()
    assert grad_check(f, [p[k] for k in keys] + [w, r], seed=11) < 1e-3


# -- synthesis


def _frame_inputs(seed):
    g = _g(seed)
    I0, Iprev = _img(g), _img(g)
    P0, Pprev, Pt = (_img(g, c=TOY.pose_channels) for _ in range(3))
    return I0, P0, Iprev, Pprev, Pt


def test_forced_map_compositing_identities():
    p = toy_params(12)
    args = _frame_inputs(12)
    out1, im1 = synthesize_frame(*args, p, TOY, force_map=1.0)
    assert torch.equal(out1, im1.warped)
    out0, im0 = synthesize_frame(*args, p, TOY, force_map=0.0)
    assert torch.equal(out0, im0.rough)


def test_compositing_is_convex():
    p = toy_params(13)
    out, im = synthesize_frame(*_frame_inputs(13), p, TOY)
    lo, hi = torch.minimum(im.warped, im.rough), torch.maximum(im.warped, im.rough)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


@pytest.mark.parametrize("group", ["pen", "ien", "fn", "mn", "decoder", "wn"])
def test_end_to_end_frame_gradient_per_group(group):
    p = toy_params(14)
    args = _frame_inputs(14)
    tgt = _img(_g(99))
    keys = list(p.group(group))

    def f(*ws):
        q = TDGNParams(p)
        q.update(zip(keys, ws))
        return (synthesize_frame(*args, q, TOY)[0] - tgt).abs().mean()
    assert grad_check(f, [p[k] for k in keys], seed=14) < 1e-3


def test_move_chains_first_output():
    p = toy_params(15)
    I0, P0, _, _, Pa = _frame_inputs(15)
    Pb = _img(_g(16), c=TOY.pose_channels)
    a, b = synthesize_move(I0, P0, I0, P0, (Pa, Pb), p, TOY)
    a_ref, _ = synthesize_frame(I0, P0, I0, P0, Pa, p, TOY)
    b_ref, _ = synthesize_frame(I0, P0, a_ref, Pa, Pb, p, TOY)
    assert torch.equal(a, a_ref) and torch.equal(b, b_ref)


def test_second_frame_loss_flows_through_first_frame():
    p = TDGNParams((k, v.clone().requires_grad_(True)) for k, v in toy_params(17).items())
    I0, P0, _, _, Pa = _frame_inputs(17)
    Pb = _img(_g(18), c=TOY.pose_channels)
    tgt = _img(_g(19))
    grads = []
    for detach in (False, True):
        _, b = synthesize_move(I0, P0, I0, P0, (Pa, Pb), p, TOY, detach_first=detach)
        loss = (b - tgt).abs().mean()
        grads.append(torch.autograd.grad(loss, list(p.values())))
    diff = sum(float((x - y).abs().sum()) for x, y in zip(*grads))
    assert diff > 1e-8


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("mode", ["move", "frame"])
def test_batched_sequence_matches_stepwise(n, mode):
    p = toy_params(20)
    g = _g(20)
    I0, P0 = _img(g), _img(g, c=TOY.pose_channels)
    poses = [_img(g, c=TOY.pose_channels) for _ in range(n)]
    a = synthesize_sequence(I0, P0, poses, p, TOY, mode)
    b = synthesize_sequence_stepwise(I0, P0, poses, p, TOY, mode)
    assert len(a) == n
    assert max(float((x - y).abs().max()) for x, y in zip(a, b)) < 1e-12


def test_length_one_sequence_uses_reference_prior():
    p = toy_params(21)
    I0, P0, _, _, Pt = _frame_inputs(21)
    out = synthesize_sequence(I0, P0, [Pt], p, TOY)
    ref, _ = synthesize_frame(I0, P0, I0, P0, Pt, p, TOY)
    assert len(out) == 1 and torch.allclose(out[0], ref, atol=1e-12)


def test_sequence_deterministic():
    p = toy_params(22)
    g = _g(22)
    I0, P0 = _img(g), _img(g, c=TOY.pose_channels)
    poses = [_img(g, c=TOY.pose_channels) for _ in range(4)]
    a = synthesize_sequence(I0, P0, poses, p, TOY)
    b = synthesize_sequence(I0, P0, poses, p, TOY)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_feature_cache_reuses_encodings():
    p = toy_params(23)
    cache = FeatureCache(p, TOY)
    x = _img(_g(23), c=TOY.pose_channels)
    assert cache.pose(x) is cache.pose(x)


def test_apply_modulation_matches_modulate():
    p = toy_params(24)
    g = _g(24)
    ri, rprev, rp, rpp = _pyr(g), _pyr(g), _pyr(g), _pyr(g)
    a = modulate(ri, rprev, rp, rpp, p, TOY)
    b = apply_modulation(ri, rprev, modulation_maps(rp, rpp, p, TOY))
    assert all(torch.equal(x, y) for x, y in zip(a, b))
