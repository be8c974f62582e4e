"""Temporal dancing generation network, written as pure functions of a parameter dict.

Every network takes its parameters explicitly so that adapted parameter sets
(and graphs through their updates) can be pushed through the same code.
Tensors are NCHW; flows are (B, 2, H, W) in pixels, channel 0 = dx.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .sampling import move_index_pairs

GROUPS = ("pen", "ien", "fn", "mn", "decoder", "wn")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    height: int = 64
    width: int = 32
    pose_channels: int = 11

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("the pyramid needs at least 2 levels")
        f = 2 ** self.levels
        if self.height % f or self.width % f:
            raise ConfigError(
                f"resolution {self.width}x{self.height} is not divisible by 2^{self.levels}")

    def channels(self, level: int) -> int:
        """Feature channels at pyramid level 1..N."""
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class TDGNParams(OrderedDict):
    """Flat ``group.layer.w|b`` -> tensor mapping with the arithmetic MAML needs."""

    def group(self, name: str) -> "TDGNParams":
        pre = name + "."
        return TDGNParams((k, v) for k, v in self.items() if k.startswith(pre))

    @property
    def groups(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for k in self:
            out.setdefault(k.split(".", 1)[0], []).append(k)
        return out

    def clone(self) -> "TDGNParams":
        return TDGNParams((k, v.detach().clone()) for k, v in self.items())

    def detach(self) -> "TDGNParams":
        return TDGNParams((k, v.detach()) for k, v in self.items())

    def requires_grad_(self, flag: bool = True) -> "TDGNParams":
        for v in self.values():
            v.requires_grad_(flag)
        return self

    def to(self, dtype) -> "TDGNParams":
        return TDGNParams((k, v.detach().to(dtype)) for k, v in self.items())

    def add(self, other: Dict[str, torch.Tensor], scale: float = 1.0) -> "TDGNParams":
        return TDGNParams((k, v + scale * other[k]) for k, v in self.items())

    def scale(self, c: float) -> "TDGNParams":
        return TDGNParams((k, c * v) for k, v in self.items())

    def sub(self, other) -> "TDGNParams":
        return self.add(other, -1.0)

    def numpy(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.items()}

    @classmethod
    def from_numpy(cls, arrays: Dict[str, np.ndarray], dtype=torch.float32) -> "TDGNParams":
        return cls((k, torch.tensor(np.asarray(v), dtype=dtype)) for k, v in arrays.items())

    def equal(self, other) -> bool:
        return list(self) == list(other) and all(torch.equal(self[k], other[k]) for k in self)

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.values())


# ---------------------------------------------------------------------------
# parameter layout


class _Layout:
    def __init__(self):
        self.entries: List[Tuple[str, tuple, str]] = []

    def conv(self, name, cin, cout, zero=False, k=3):
        self.entries.append((name + ".w", (cout, cin, k, k), "zero" if zero else "fan_in"))
        self.entries.append((name + ".b", (cout,), "zero"))

    def resblock(self, name, c):
        self.conv(name + ".c1", c, c)
        self.conv(name + ".c2", c, c)


def _encoder_layout(L, prefix, cin, cfg):
    prev = cin
    for l in range(1, cfg.levels + 1):
        c = cfg.channels(l)
        L.conv(f"{prefix}.s{l}.down", prev, c)
        L.resblock(f"{prefix}.s{l}.rb1", c)
        L.resblock(f"{prefix}.s{l}.rb2", c)
        prev = c


def model_layout(cfg: ModelConfig) -> List[Tuple[str, tuple, str]]:
    L = _Layout()
    _encoder_layout(L, "pen", cfg.pose_channels, cfg)
    _encoder_layout(L, "ien", 3, cfg)
    for l in range(cfg.levels, 0, -1):
        c = cfg.channels(l)
        L.conv(f"fn.l{l}.c1", 2 * c, c)
        L.conv(f"fn.l{l}.head", c, 2, zero=True)
    for l in range(1, cfg.levels + 1):
        c = cfg.channels(l)
        L.conv(f"mn.l{l}.shared", 2 * c, c)
        L.conv(f"mn.l{l}.gamma", c, 2 * c, zero=True)
        L.conv(f"mn.l{l}.beta", c, 2 * c, zero=True)
    n = cfg.levels
    L.resblock(f"decoder.l{n}.rb1", 2 * cfg.channels(n))
    L.resblock(f"decoder.l{n}.rb2", 2 * cfg.channels(n))
    for l in range(n - 1, 0, -1):
        L.conv(f"decoder.l{l}.up", 2 * cfg.channels(l + 1), 2 * cfg.channels(l))
        L.resblock(f"decoder.l{l}.rb1", 2 * cfg.channels(l))
        L.resblock(f"decoder.l{l}.rb2", 2 * cfg.channels(l))
    L.conv("decoder.out.c1", 2 * cfg.channels(1), cfg.base_channels)
    L.conv("decoder.out.head", cfg.base_channels, 3)
    b = cfg.base_channels
    L.conv("wn.enc", 6, b)
    L.resblock("wn.enc.rb", b)
    L.conv("wn.down", b, 2 * b)
    L.resblock("wn.mid.rb", 2 * b)
    L.conv("wn.up", 2 * b, b)
    L.resblock("wn.dec.rb", b)
    L.conv("wn.head", b, 1, zero=True)
    return L.entries


def init_from_layout(entries, seed: int, dtype=torch.float32, zero_heads: bool = True,
                     head_scale: float = 0.1) -> TDGNParams:
    """Fan-in scaled uniform init; zero-marked tensors stay zero unless ``zero_heads`` is off."""
    g = torch.Generator().manual_seed(int(seed))
    out = TDGNParams()
    for name, shape, kind in entries:
        if kind == "zero" and (zero_heads or name.endswith(".b")):
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            if kind == "zero":
                bound *= head_scale
            t = (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1) * bound
        out[name] = t.to(dtype)
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32,
                zero_heads: bool = True) -> TDGNParams:
    return init_from_layout(model_layout(cfg), seed, dtype, zero_heads)


def randomize_biases(params: TDGNParams, seed: int, scale: float = 0.05) -> TDGNParams:
    """Copy with small random biases; gradient checks use it to avoid degenerate zeros."""
    g = torch.Generator().manual_seed(int(seed))
    out = TDGNParams()
    for k, v in params.items():
        if k.endswith(".b"):
            noise = (torch.rand(v.shape, generator=g, dtype=torch.float64) * 2 - 1) * scale
            out[k] = v.detach() + noise.to(v.dtype)
        else:
            out[k] = v.detach().clone()
    return out


# ---------------------------------------------------------------------------
# layers


def conv(x, p, name, stride=1):
    w = p[name + ".w"]
    return F.conv2d(x, w, p[name + ".b"], stride=stride, padding=w.shape[-1] // 2)


def act(x):
    return F.silu(x)


def resblock(x, p, name):
    h = conv(act(x), p, name + ".c1")
    h = conv(act(h), p, name + ".c2")
    return x + h


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def instance_norm(x, eps=1e-5):
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = ((x - mu) ** 2).mean(dim=(2, 3), keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp: ``out(x) = img(x + flow(x))`` with border clamping.

    Built from gathers and arithmetic only, so it is twice differentiable in
    both the image and the flow.
    """
    if img.shape[-2:] != flow.shape[-2:] or flow.shape[1] != 2:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match image {tuple(img.shape)}")
    b, c, h, w = img.shape
    ys = torch.arange(h, dtype=flow.dtype).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype).view(1, 1, w)
    sx = torch.clamp(xs + flow[:, 0], 0, w - 1)
    sy = torch.clamp(ys + flow[:, 1], 0, h - 1)
    x0 = torch.floor(sx).detach()
    y0 = torch.floor(sy).detach()
    ax = (sx - x0).unsqueeze(1)
    ay = (sy - y0).unsqueeze(1)
    x0i, y0i = x0.long(), y0.long()
    x1i = torch.clamp(x0i + 1, max=w - 1)
    y1i = torch.clamp(y0i + 1, max=h - 1)
    flat = img.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).view(b, c, h, w)

    return (gather(y0i, x0i) * ((1 - ax) * (1 - ay)) + gather(y0i, x1i) * (ax * (1 - ay))
            + gather(y1i, x0i) * ((1 - ax) * ay) + gather(y1i, x1i) * (ax * ay))


# ---------------------------------------------------------------------------
# sub-networks


def _check_input(x, cfg: ModelConfig, channels: int, what: str):
    if x.dim() != 4 or x.shape[1] != channels or tuple(x.shape[-2:]) != (cfg.height, cfg.width):
        raise ShapeError(f"{what}: expected (B, {channels}, {cfg.height}, {cfg.width}), "
                         f"got {tuple(x.shape)}")


def _encode(x, p, prefix, cfg):
    feats = []
    for l in range(1, cfg.levels + 1):
        x = act(conv(x, p, f"{prefix}.s{l}.down", stride=2))
        x = resblock(x, p, f"{prefix}.s{l}.rb1")
        x = resblock(x, p, f"{prefix}.s{l}.rb2")
        feats.append(x)
    return feats


def extract_pose_features(pose, p, cfg: ModelConfig) -> List[torch.Tensor]:
    """Pyramid features of a pose map; element i is level i+1 at 1/2^(i+1) resolution."""
    _check_input(pose, cfg, cfg.pose_channels, "pose map")
    return _encode(pose, p, "pen", cfg)


def extract_image_features(img, p, cfg: ModelConfig) -> List[torch.Tensor]:
    _check_input(img, cfg, 3, "image")
    return _encode(img, p, "ien", cfg)


def _check_pyramids(cfg, *pyrs):
    for pyr in pyrs:
        if len(pyr) != cfg.levels:
            raise ShapeError(f"expected {cfg.levels} pyramid levels, got {len(pyr)}")
    for l in range(cfg.levels):
        shapes = {tuple(pyr[l].shape[-2:]) for pyr in pyrs}
        if len(shapes) != 1:
            raise ShapeError(f"pyramid level {l + 1} sizes disagree: {shapes}")


def predict_flow(r_ref, r_target, p, cfg: ModelConfig) -> torch.Tensor:
    """Coarse-to-fine flow from reference-pose to target-pose features, full resolution."""
    _check_pyramids(cfg, r_ref, r_target)
    flow = None
    for l in range(cfg.levels, 0, -1):
        src, tgt = r_ref[l - 1], r_target[l - 1]
        if flow is None:
            h = act(conv(torch.cat([src, tgt], 1), p, f"fn.l{l}.c1"))
            flow = conv(h, p, f"fn.l{l}.head")
        else:
            flow = 2.0 * upsample(flow)
            h = act(conv(torch.cat([warp(src, flow), tgt], 1), p, f"fn.l{l}.c1"))
            flow = flow + conv(h, p, f"fn.l{l}.head")
    return 2.0 * upsample(flow)


def modulation_maps(r_pose, r_pose_prev, p, cfg: ModelConfig):
    """Per-level (gamma, beta) predicted from target and previous pose features."""
    _check_pyramids(cfg, r_pose, r_pose_prev)
    out = []
    for l in range(1, cfg.levels + 1):
        seg = act(conv(torch.cat([r_pose[l - 1], r_pose_prev[l - 1]], 1), p, f"mn.l{l}.shared"))
        out.append((conv(seg, p, f"mn.l{l}.gamma"), conv(seg, p, f"mn.l{l}.beta")))
    return out


def apply_modulation(r_img, r_img_prev, maps) -> List[torch.Tensor]:
    return [instance_norm(torch.cat([a, b], 1)) * (1 + g) + bt
            for a, b, (g, bt) in zip(r_img, r_img_prev, maps)]


def modulate(r_img, r_img_prev, r_pose, r_pose_prev, p, cfg: ModelConfig) -> List[torch.Tensor]:
    """Spatially-adaptive modulation of image features by pose features, per level.

    Reference and previous-result image features are concatenated, normalized
    per channel without parameters, then scaled and shifted pixel-wise.
    """
    _check_pyramids(cfg, r_img, r_img_prev, r_pose, r_pose_prev)
    return apply_modulation(r_img, r_img_prev, modulation_maps(r_pose, r_pose_prev, p, cfg))


def decode(r, p, cfg: ModelConfig) -> torch.Tensor:
    """Coarse-to-fine decoding with skip connections; output squashed into [0, 1]."""
    if len(r) != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} pyramid levels, got {len(r)}")
    n = cfg.levels
    for l in range(1, n + 1):
        want = (2 * cfg.channels(l), cfg.height // 2 ** l, cfg.width // 2 ** l)
        if tuple(r[l - 1].shape[1:]) != want:
            raise ShapeError(f"decoder level {l}: expected {want}, got {tuple(r[l - 1].shape[1:])}")
    x = resblock(r[n - 1], p, f"decoder.l{n}.rb1")
    x = resblock(x, p, f"decoder.l{n}.rb2")
    for l in range(n - 1, 0, -1):
        x = conv(upsample(x), p, f"decoder.l{l}.up") + r[l - 1]
        x = resblock(x, p, f"decoder.l{l}.rb1")
        x = resblock(x, p, f"decoder.l{l}.rb2")
    x = act(conv(upsample(x), p, "decoder.out.c1"))
    return torch.sigmoid(conv(x, p, "decoder.out.head"))


def predict_occlusion(warped, rough, p, cfg: ModelConfig) -> torch.Tensor:
    """Small residual U-Net over (warped, rough); returns a (B, 1, H, W) map in (0, 1)."""
    _check_input(warped, cfg, 3, "warped image")
    _check_input(rough, cfg, 3, "rough image")
    e = act(conv(torch.cat([warped, rough], 1), p, "wn.enc"))
    e = resblock(e, p, "wn.enc.rb")
    m = act(conv(e, p, "wn.down", stride=2))
    m = resblock(m, p, "wn.mid.rb")
    d = conv(upsample(m), p, "wn.up") + e
    d = resblock(d, p, "wn.dec.rb")
    return torch.sigmoid(conv(act(d), p, "wn.head"))


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SynthesisIntermediates:
    flow: torch.Tensor
    warped: torch.Tensor
    rough: torch.Tensor
    occlusion: torch.Tensor
    modulated: List[torch.Tensor]


class FeatureCache:
    """Memoizes encoder outputs of inputs that recur within one sequence."""

    def __init__(self, p, cfg):
        self.p, self.cfg = p, cfg
        self._pose: Dict[int, list] = {}
        self._img: Dict[int, list] = {}

    def pose(self, x):
        key = id(x)
        if key not in self._pose:
            self._pose[key] = (x, extract_pose_features(x, self.p, self.cfg))
        return self._pose[key][1]

    def image(self, x):
        key = id(x)
        if key not in self._img:
            self._img[key] = (x, extract_image_features(x, self.p, self.cfg))
        return self._img[key][1]


def synthesize_frame(I0, P0, I_prev, P_prev, P_t, p, cfg: ModelConfig,
                     cache: Optional[FeatureCache] = None, force_map: Optional[float] = None):
    """One frame from the reference, the previous result and the target pose.

    Returns ``(frame, SynthesisIntermediates)``.
    """
    cache = cache or FeatureCache(p, cfg)
    r_p0, r_pt, r_pprev = cache.pose(P0), cache.pose(P_t), cache.pose(P_prev)
    r_i0, r_iprev = cache.image(I0), cache.image(I_prev)
    flow = predict_flow(r_p0, r_pt, p, cfg)
    warped = warp(I0, flow)
    r = modulate(r_i0, r_iprev, r_pt, r_pprev, p, cfg)
    rough = decode(r, p, cfg)
    if force_map is None:
        occ = predict_occlusion(warped, rough, p, cfg)
    else:
        occ = torch.full_like(rough[:, :1], float(force_map))
    out = occ * warped + (1 - occ) * rough
    return out, SynthesisIntermediates(flow, warped, rough, occ, r)


def synthesize_move(I0, P0, I_prev_in, P_prev_in, move_poses, p, cfg: ModelConfig,
                    cache: Optional[FeatureCache] = None, detach_first: bool = False):
    """Two chained frames: the second consumes the first frame's output."""
    cache = cache or FeatureCache(p, cfg)
    P_s, P_s1 = move_poses
    I_s, _ = synthesize_frame(I0, P0, I_prev_in, P_prev_in, P_s, p, cfg, cache)
    prev = I_s.detach() if detach_first else I_s
    I_s1, _ = synthesize_frame(I0, P0, prev, P_s, P_s1, p, cfg, cache)
    return I_s, I_s1


move_pairs = move_index_pairs


def synthesize_sequence(I0, P0, poses: List[torch.Tensor], p, cfg: ModelConfig,
                        mode: str = "move") -> List[torch.Tensor]:
    """Frames for a pose sequence, generated move by move.

    In ``move`` mode each frame is conditioned on the previously generated
    frame (the first on the reference pair). In ``frame`` mode every frame is
    conditioned on the reference pair only. Everything that depends on poses
    alone (pose features, flows, warps, modulation maps) is computed in one
    batched pass; only the image path runs frame by frame.
    """
    if len(poses) < 1:
        raise ValueError("pose sequence must be non-empty")
    if mode not in ("move", "frame"):
        raise ValueError(f"unknown synthesis mode {mode!r}")
    n, b = len(poses), I0.shape[0]
    r_all = extract_pose_features(torch.cat([P0] + list(poses), 0), p, cfg)
    r_p0 = [r[:b] for r in r_all]
    r_pt = [r[b:] for r in r_all]
    r_p0_rep = [r.repeat(n, 1, 1, 1) for r in r_p0]
    if mode == "move":
        r_prev = [r[:n * b] for r in r_all]
    else:
        r_prev = r_p0_rep
    I0_rep = I0.repeat(n, 1, 1, 1)
    warped = warp(I0_rep, predict_flow(r_p0_rep, r_pt, p, cfg))
    maps = modulation_maps(r_pt, r_prev, p, cfg)
    r_i0 = extract_image_features(I0, p, cfg)
    if mode == "frame":
        r_i0_rep = [r.repeat(n, 1, 1, 1) for r in r_i0]
        rough = decode(apply_modulation(r_i0_rep, r_i0_rep, maps), p, cfg)
        occ = predict_occlusion(warped, rough, p, cfg)
        out = occ * warped + (1 - occ) * rough
        return list(out.split(b, 0))
    frames: List[torch.Tensor] = []
    r_iprev = r_i0
    for t in range(n):
        sl = slice(t * b, (t + 1) * b)
        mt = [(g[sl], bt[sl]) for g, bt in maps]
        rough = decode(apply_modulation(r_i0, r_iprev, mt), p, cfg)
        occ = predict_occlusion(warped[sl], rough, p, cfg)
        frame = occ * warped[sl] + (1 - occ) * rough
        frames.append(frame)
        if t + 1 < n:
            r_iprev = extract_image_features(frame, p, cfg)
    return frames


def synthesize_sequence_stepwise(I0, P0, poses: List[torch.Tensor], p, cfg: ModelConfig,
                                 mode: str = "move") -> List[torch.Tensor]:
    """Reference path built from synthesize_move/synthesize_frame calls."""
    if len(poses) < 1:
        raise ValueError("pose sequence must be non-empty")
    cache = FeatureCache(p, cfg)
    if mode == "frame":
        return [synthesize_frame(I0, P0, I0, P0, pt, p, cfg, cache)[0] for pt in poses]
    if len(poses) == 1:
        return [synthesize_frame(I0, P0, I0, P0, poses[0], p, cfg, cache)[0]]
    out: List[Optional[torch.Tensor]] = [None] * len(poses)
    prev_img, prev_pose = I0, P0
    for a, b in move_pairs(len(poses)):
        if out[a] is not None:
            # overlapping tail move: frame a already exists, only b is new
            out[b], _ = synthesize_frame(I0, P0, out[a], poses[a], poses[b], p, cfg, cache)
        else:
            out[a], out[b] = synthesize_move(I0, P0, prev_img, prev_pose, (poses[a], poses[b]),
                                             p, cfg, cache)
        prev_img, prev_pose = out[b], poses[b]
    return out
