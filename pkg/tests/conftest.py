import numpy as np
import pytest
import torch

from movesynth.data_synth import DatasetConfig, in_memory_dataset
from movesynth.losses import FeatureExtractor, LossContext, LossWeights, init_discriminator
from movesynth.meta import SeqTensors, TaskTensors
from movesynth.model import ModelConfig, init_params, randomize_biases

# toy generator used by every gradient check: 8x16, two pyramid levels, 8 base channels
TOY = ModelConfig(levels=2, base_channels=8, height=8, width=16)


def toy_params(seed=0, dtype=torch.float64):
    """Toy generator with nonzero heads and biases, so no gradient is trivially zero."""
    return randomize_biases(init_params(TOY, seed, dtype, zero_heads=False), seed + 1)


def toy_context(seed=0, dtype=torch.float64, weights=LossWeights()):
    fx = FeatureExtractor(dtype=dtype)
    D = randomize_biases(init_discriminator(seed, 8, dtype, zero_head=False), seed + 2)
    return LossContext(fx, D, weights)


def toy_sequence(g, n, cfg=TOY, dtype=torch.float64):
    h, w = cfg.height, cfg.width
    frames = [torch.rand(1, 3, h, w, generator=g, dtype=dtype) for _ in range(n)]
    poses = [torch.rand(1, cfg.pose_channels, h, w, generator=g, dtype=dtype) for _ in range(n)]
    flows = [(torch.rand(1, 2, h, w, generator=g, dtype=dtype) - 0.5) * 3 for _ in range(n - 1)]
    masks = [torch.ones(1, 1, h, w, dtype=dtype) for _ in range(n - 1)]
    return SeqTensors(frames, poses, flows, masks)


def toy_task(seed=0, support=2, query=2, cfg=TOY, dtype=torch.float64) -> TaskTensors:
    g = torch.Generator().manual_seed(seed)
    h, w = cfg.height, cfg.width
    I0 = torch.rand(1, 3, h, w, generator=g, dtype=dtype)
    P0 = torch.rand(1, cfg.pose_channels, h, w, generator=g, dtype=dtype)
    return TaskTensors(I0, P0, toy_sequence(g, support, cfg, dtype), toy_sequence(g, query, cfg, dtype))


def directional_fd(f, tensors, direction, h):
    """Central difference of scalar ``f()`` along ``direction`` applied to ``tensors`` in place."""
    with torch.no_grad():
        for t, d in zip(tensors, direction):
            t.add_(h * d)
        fp = float(f())
        for t, d in zip(tensors, direction):
            t.sub_(2 * h * d)
        fm = float(f())
        for t, d in zip(tensors, direction):
            t.add_(h * d)
    return (fp - fm) / (2 * h)


def normalized_direction(tensors, g):
    """Random direction scaled so each tensor moves by its own RMS magnitude per unit step."""
    out = []
    for t in tensors:
        d = torch.randn(t.shape, generator=g, dtype=t.dtype)
        scale = t.detach().pow(2).mean().sqrt().clamp(min=1e-3)
        out.append(d / d.pow(2).mean().sqrt() * scale)
    return out


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def grad_check(f, tensors, seed=0, h=1e-3, trials=2):
    """Max relative error between autograd and central differences along random directions."""
    g = torch.Generator().manual_seed(seed)
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    worst = 0.0
    for _ in range(trials):
        d = normalized_direction(leaves, g)
        out = f(*leaves)
        grads = torch.autograd.grad(out, leaves, allow_unused=True)
        an = sum(float((gr * di).sum()) for gr, di in zip(grads, d) if gr is not None)
        fd = directional_fd(lambda: f(*leaves), leaves, d, h)
        worst = max(worst, rel_err(an, fd))
    return worst


@pytest.fixture(scope="session")
def small_manifest():
    """Three training and two test identities, one 80-frame clip each, in memory."""
    return in_memory_dataset(DatasetConfig(n_train=3, n_test=2, clips_per_identity=1, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        ok, detail = verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
