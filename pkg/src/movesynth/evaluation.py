"""Meta-test episodes: adapt on the support, synthesize the query, score it."""
from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from . import metrics as M
from .losses import LossContext
from .meta import TaskTensors, adapt
from .model import ModelConfig, synthesize_sequence
from .sampling import Episode


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 1e-4
    steps: int = 3
    variant: str = "move"
    adapt: bool = True
    fid: bool = False
    clip_norm: Optional[float] = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def synthesis_mode(variant: str) -> str:
    return "frame" if variant == "frame" else "move"


def default_generator(params, tt: TaskTensors, cfg: ModelConfig, variant: str):
    with torch.no_grad():
        return synthesize_sequence(tt.I0, tt.P0, tt.query.poses, params, cfg,
                                   synthesis_mode(variant))


def run_episode(params, episode: Episode, ctx: LossContext, model_cfg: ModelConfig,
                cfg: EvalConfig = EvalConfig(), generator: Optional[Callable] = None):
    """Returns ``(MetricsRecord, synthesized query frames as (T, H, W, 3) array)``.

    ``generator(params, task_tensors, model_cfg, variant)`` replaces the
    generator forward pass, e.g. with an oracle that copies the targets.
    """
    tt = TaskTensors.from_task(episode.task)
    theta = params
    if cfg.adapt:
        theta = adapt(params, tt, ctx, model_cfg, cfg.alpha, cfg.steps, cfg.variant, cfg.clip_norm)
    gen = generator or default_generator
    frames = gen(theta, tt, model_cfg, cfg.variant)
    pred = np.stack([f.detach().cpu().numpy()[0].transpose(1, 2, 0) if torch.is_tensor(f)
                     else np.asarray(f) for f in frames]).astype(np.float64)
    truth = episode.task.query
    flows = truth.flows
    rec = M.MetricsRecord(
        episode_id=episode.episode_id, person_id=episode.person_id, K=episode.K,
        mse=M.mse(pred, truth), psnr=M.psnr(pred, truth), ssim=M.ssim(pred, truth),
        fid=M.proxy_fid(pred, truth, ctx.fx) if cfg.fid else None,
        twe=M.twe(pred, flows) if flows is not None else None)
    return rec, pred


def _worker_init():
    torch.set_num_threads(1)


def _episode_job(job):
    params, ep, ctx, model_cfg, cfg, keep = job
    rec, pred = run_episode(params, ep, ctx, model_cfg, cfg)
    return rec, (pred if keep else None)


def evaluate(params, episodes: List[Episode], ctx: LossContext, model_cfg: ModelConfig,
             cfg: EvalConfig = EvalConfig(), keep_frames: int = 0, workers: int = 1):
    """Records for every episode, plus synthesized frames of the first ``keep_frames``.

    With ``workers > 1`` episodes run in single-threaded worker processes;
    results come back in episode order.
    """
    jobs = [(params, ep, ctx, model_cfg, cfg, i < keep_frames) for i, ep in enumerate(episodes)]
    if workers > 1 and len(jobs) > 1:
        ctx_mp = mp.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx_mp, initializer=_worker_init) as pool:
            results = list(pool.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]
    records = [r for r, _ in results]
    kept = [p for _, p in results if p is not None]
    return records, kept


def episode_strip(episode: Episode, pred: np.ndarray, max_frames: int = 16) -> np.ndarray:
    """Support row, synthesized query row and ground-truth query row as one image."""
    sup = [episode.task.reference[0].pixels] + [f.pixels for f in episode.task.support.frames]
    gt = [f.pixels for f in episode.task.query.frames][:max_frames]
    syn = list(pred[:max_frames])
    n = max(len(sup), len(gt))
    h, w = gt[0].shape[:2]
    blank = np.ones((h, w, 3)) * 1.0

    def row(imgs):
        imgs = list(imgs) + [blank] * (n - len(imgs))
        return np.concatenate(imgs, 1)

    return np.concatenate([row(sup), row(syn), row(gt)], 0)
