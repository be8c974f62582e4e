"""Per-move losses: pixel L1, perceptual features and the temporal GAN term.

Frames are (B, 3, H, W) tensors in [0, 1]; flows are (B, 2, H, W) backward
flows on the later frame's grid, as produced by the renderer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence as Seq

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .model import TDGNParams, init_from_layout
from .sampling import move_index_pairs

EXTRACTOR_SEED = 1234


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    temporal: float = 0.1

    def __post_init__(self):
        vals = (self.l1, self.perceptual, self.temporal)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ConfigError(f"loss weights must be finite and nonnegative: {vals}")
        if all(v == 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.l1 * c, self.perceptual * c, self.temporal * c)

    def without_temporal(self) -> "LossWeights":
        return replace(self, temporal=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# frozen feature pyramid


class FeatureExtractor:
    """Frozen strided conv pyramid standing in for a pretrained perceptual network.

    Weights are a pure function of ``seed`` unless loaded from an archive.
    """

    def __init__(self, seed: int = EXTRACTOR_SEED, channels=(16, 32, 64), stages=(1, 2, 3),
                 dtype=torch.float32, weights: Optional[dict] = None):
        self.seed = seed
        self.channels = tuple(channels)
        self.stages = tuple(stages)
        if weights is None:
            g = torch.Generator().manual_seed(int(seed))
            weights, prev = {}, 3
            for i, c in enumerate(self.channels, 1):
                bound = math.sqrt(6.0 / (prev * 9))
                weights[f"s{i}.w"] = (torch.rand((c, prev, 3, 3), generator=g,
                                                 dtype=torch.float64) * 2 - 1) * bound
                weights[f"s{i}.b"] = torch.zeros(c, dtype=torch.float64)
                prev = c
        self._w = {k: torch.as_tensor(v).detach().to(dtype) for k, v in weights.items()}
        for v in self._w.values():
            v.requires_grad_(False)

    def to(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(self.seed, self.channels, self.stages, dtype, self._w)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Outputs of every stage, finest first."""
        h = x * 2 - 1
        out = []
        for i in range(1, len(self.channels) + 1):
            h = F.silu(F.conv2d(h, self._w[f"s{i}.w"], self._w[f"s{i}.b"], stride=2, padding=1))
            out.append(h)
        return out

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Globally averaged last-stage features, (B, C)."""
        return self.features(x)[-1].mean(dim=(2, 3))

    def state(self) -> dict:
        return {k: v.detach().cpu().numpy() for k, v in self._w.items()}

    def save(self, path) -> None:
        from .io import save_archive
        save_archive(path, "fx/1", self.state(),
                     config={"channels": list(self.channels), "stages": list(self.stages),
                             "seed": self.seed})

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "FeatureExtractor":
        from .io import load_archive
        header, arrays = load_archive(path, kind="fx/1")
        cfg = header["config"]
        return cls(cfg.get("seed", EXTRACTOR_SEED), cfg["channels"], cfg["stages"], dtype,
                   {k: torch.from_numpy(v) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# temporal discriminator


def discriminator_layout(base: int = 16):
    entries, prev = [], 8
    for i in range(1, 4):
        c = base * 2 ** (i - 1)
        entries += [(f"d.s{i}.w", (c, prev, 3, 3), "fan_in"), (f"d.s{i}.b", (c,), "zero")]
        prev = c
    entries += [("d.head.w", (1, prev, 3, 3), "zero"), ("d.head.b", (1,), "zero")]
    return entries


def init_discriminator(seed: int = 0, base: int = 16, dtype=torch.float32,
                       zero_head: bool = True) -> TDGNParams:
    """Temporal discriminator parameters; the zero head makes every initial logit 0."""
    return init_from_layout(discriminator_layout(base), seed + 7919, dtype, zero_head)


def discriminator_logits(a, b, flow, D, flow_scale: Optional[float] = None) -> torch.Tensor:
    """Patch logits (B, 1, h, w) for a frame pair and the flow between them."""
    _check_pair(a, b, "discriminator frames")
    if flow.shape[0] != a.shape[0] or flow.shape[1] != 2 or flow.shape[-2:] != a.shape[-2:]:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match frames {tuple(a.shape)}")
    scale = flow_scale or float(max(a.shape[-2:]))
    x = torch.cat([a * 2 - 1, b * 2 - 1, flow / scale], 1)
    for i in range(1, 4):
        x = F.silu(F.conv2d(x, D[f"d.s{i}.w"], D[f"d.s{i}.b"], stride=2, padding=1))
    return F.conv2d(x, D["d.head.w"], D["d.head.b"], padding=1)


# ---------------------------------------------------------------------------
# per-move losses


def l1_move_loss(pred, truth) -> torch.Tensor:
    """Mean absolute error of each frame, summed over the two frames of a move."""
    total = 0.0
    for p, t in zip(pred, truth):
        _check_pair(p, t, "l1")
        total = total + (p - t).abs().mean()
    return total


def perceptual_move_loss(pred, truth, fx: FeatureExtractor) -> torch.Tensor:
    total = 0.0
    for p, t in zip(pred, truth):
        _check_pair(p, t, "perceptual")
        fp, ft = fx.features(p), fx.features(t)
        for m in fx.stages:
            total = total + (fp[m - 1] - ft[m - 1]).abs().mean()
    return total


def temporal_gan_loss_g(pred_move, flow, D, flow_scale=None) -> torch.Tensor:
    """Non-saturating generator loss, -mean log sigmoid(D(fake pair))."""
    logits = discriminator_logits(pred_move[0], pred_move[1], flow, D, flow_scale)
    return F.softplus(-logits).mean()


def temporal_gan_loss_d(real_move, fake_move, flow, D, flow_scale=None) -> torch.Tensor:
    """Logistic discriminator loss; fake frames carry no generator gradient."""
    real = discriminator_logits(real_move[0], real_move[1], flow, D, flow_scale)
    fake = discriminator_logits(fake_move[0].detach(), fake_move[1].detach(), flow, D, flow_scale)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def move_loss(pred_move, truth_move, flow, fx, D, w: LossWeights) -> torch.Tensor:
    total = 0.0
    if w.l1:
        total = total + w.l1 * l1_move_loss(pred_move, truth_move)
    if w.perceptual:
        total = total + w.perceptual * perceptual_move_loss(pred_move, truth_move, fx)
    if w.temporal:
        total = total + w.temporal * temporal_gan_loss_g(pred_move, flow, D)
    return total


# ---------------------------------------------------------------------------
# whole sequences


@dataclass
class LossContext:
    """What a sequence loss needs besides the frames: extractor, discriminator, weights."""

    fx: FeatureExtractor
    D: Optional[TDGNParams]
    weights: LossWeights

    def with_weights(self, weights: LossWeights) -> "LossContext":
        return LossContext(self.fx, self.D, weights)


def _per_frame_terms(pred: torch.Tensor, truth: torch.Tensor, ctx: LossContext, w: LossWeights):
    """(T,) pixel and perceptual terms for stacked (T, B, 3, H, W) frames."""
    t = pred.shape[0]
    zero = pred.new_zeros(t)
    l1 = (pred - truth).abs().flatten(1).mean(1) if w.l1 else zero
    perc = zero
    if w.perceptual:
        fp = ctx.fx.features(pred.flatten(0, 1))
        with torch.no_grad():
            ft = ctx.fx.features(truth.flatten(0, 1))
        perc = 0.0
        for m in ctx.fx.stages:
            perc = perc + (fp[m - 1] - ft[m - 1]).abs().reshape(t, -1).mean(1)
    return l1, perc


def sequence_loss(pred: Seq[torch.Tensor], truth: Seq[torch.Tensor],
                  flows: Optional[Seq[torch.Tensor]], ctx: LossContext,
                  weights: Optional[LossWeights] = None, mode: str = "move") -> torch.Tensor:
    """Sum of move losses over the move decomposition (``move``), or of frame losses (``frame``).

    ``flows[i]`` relates truth frame i to i+1. Frame mode has no temporal term.
    """
    w = weights or ctx.weights
    if len(pred) != len(truth):
        raise ShapeError(f"{len(pred)} predicted frames vs {len(truth)} targets")
    P, T = torch.stack(list(pred)), torch.stack(list(truth))
    _check_pair(P, T, "sequence")
    l1, perc = _per_frame_terms(P, T, ctx, w)
    per_frame = w.l1 * l1 + w.perceptual * perc
    if mode == "frame":
        return per_frame.sum()
    if mode != "move":
        raise ValueError(f"unknown loss mode {mode!r}")
    pairs = move_index_pairs(len(pred))
    a_idx = [a for a, _ in pairs]
    b_idx = [b for _, b in pairs]
    total = per_frame[a_idx].sum() + per_frame[b_idx].sum()
    if w.temporal:
        if flows is None or ctx.D is None:
            raise ConfigError("the temporal term needs flows and a discriminator")
        n, b = len(pairs), P.shape[1]
        fa = P[a_idx].flatten(0, 1)
        fb = P[b_idx].flatten(0, 1)
        fl = torch.stack([flows[a] for a in a_idx]).flatten(0, 1)
        logits = discriminator_logits(fa, fb, fl, ctx.D)
        total = total + w.temporal * F.softplus(-logits).reshape(n, -1).mean(1).sum()
    return total


def discriminator_sequence_loss(pred: Seq[torch.Tensor], truth: Seq[torch.Tensor],
                                flows: Seq[torch.Tensor], D) -> torch.Tensor:
    """Discriminator loss averaged over the moves of a sequence (fakes detached)."""
    pairs = move_index_pairs(len(pred))
    a_idx = [a for a, _ in pairs]
    b_idx = [b for _, b in pairs]
    P = torch.stack([p.detach() for p in pred])
    T = torch.stack(list(truth))
    fl = torch.stack([flows[a] for a in a_idx]).flatten(0, 1)
    real = discriminator_logits(T[a_idx].flatten(0, 1), T[b_idx].flatten(0, 1), fl, D)
    fake = discriminator_logits(P[a_idx].flatten(0, 1), P[b_idx].flatten(0, 1), fl, D)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """Frame objects or HxWx3 arrays -> (N, 3, H, W)."""
    arrs = [getattr(f, "pixels", f) for f in frames]
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).to(dtype)
