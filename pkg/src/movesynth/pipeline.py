"""Glue between configs, files on disk and the training/evaluation routines."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import data_synth as ds
from .config import ExperimentConfig
from .errors import CheckpointError, ConfigError
from .evaluation import EvalConfig, episode_strip, evaluate
from .io import DatasetManifest, load_archive, save_archive, write_png
from .losses import FeatureExtractor, LossContext, init_discriminator
from .meta import MetaConfig, PretrainConfig, TrainState, meta_train, pretrain
from .metrics import MetricsRecord
from .model import ModelConfig, TDGNParams, init_params
from .sampling import Episode, SamplerConfig, build_episodes, load_episodes

log = logging.getLogger(__name__)

# meta-training variants: name -> (algorithm, loss/synthesis variant)
META_VARIANTS = {
    "metadance": ("maml", "move"),
    "td_free": ("maml", "td_free"),
    "metaframe": ("maml", "frame"),
    "reptile": ("reptile", "frame"),
}
# pretraining variants: name -> loss/synthesis variant
PRETRAIN_VARIANTS = {"move": "move", "td_free": "td_free", "frame": "frame"}
# how a checkpoint of each family is tuned and run at meta-test
ADAPT_VARIANT = {"move": "move", "td_free": "td_free", "frame": "frame",
                 "metadance": "move", "metaframe": "frame", "reptile": "frame"}


def load_manifest(cfg: ExperimentConfig, data_dir=None) -> DatasetManifest:
    path = data_dir or cfg.data_dir
    if path is None:
        raise ConfigError("no dataset given: pass --data or set data_dir in the config")
    p = Path(path)
    if not (p / "manifest.json").exists() and not (p.is_file() and p.suffix == ".json"):
        raise ConfigError(f"no manifest.json under {p}")
    return DatasetManifest.load(p)


def effective_weights(cfg: ExperimentConfig, manifest: DatasetManifest):
    """Loss weights after the no-flow rule: without flows the temporal term is off."""
    w = cfg.loss.weights
    if not manifest.has_flow and w.temporal:
        log.warning("dataset has no optical flow: temporal loss disabled")
        w = w.without_temporal()
    return w


def resolved_config(cfg: ExperimentConfig, manifest: DatasetManifest) -> ExperimentConfig:
    w = effective_weights(cfg, manifest)
    return replace(cfg, loss=replace(cfg.loss, temporal=w.temporal))


def make_context(cfg: ExperimentConfig, manifest: Optional[DatasetManifest] = None,
                 dtype=torch.float32) -> LossContext:
    if cfg.loss.extractor_path:
        fx = FeatureExtractor.load(cfg.loss.extractor_path, dtype)
    else:
        fx = FeatureExtractor(cfg.loss.extractor_seed, dtype=dtype)
    w = effective_weights(cfg, manifest) if manifest is not None else cfg.loss.weights
    D = init_discriminator(cfg.seed, cfg.loss.discriminator_base, dtype) if w.temporal else None
    return LossContext(fx, D, w)


# ---------------------------------------------------------------------------
# generator checkpoints


def save_params(path, params: TDGNParams, model_cfg: ModelConfig, extra: Optional[dict] = None):
    save_archive(path, "tdgn", params.numpy(), config=model_cfg.to_dict(), extra=extra)


def load_params(path) -> Tuple[TDGNParams, ModelConfig, dict]:
    """Generator parameters from a ``tdgn`` or ``train/1`` archive."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, arrays = load_archive(path)
    if header["kind"] == "tdgn":
        params = TDGNParams.from_numpy(arrays)
        mc = ModelConfig(**header["config"])
    elif header["kind"] == "train/1":
        params = TDGNParams.from_numpy({k[6:]: v for k, v in arrays.items()
                                        if k.startswith("theta.")})
        mc = ModelConfig(**header["config"]["model"])
    else:
        raise CheckpointError(f"{path}: kind {header['kind']} holds no generator")
    return params, mc, header.get("extra", {})


def _final(state: TrainState, out: Path, name: str, model_cfg: ModelConfig, extra: dict) -> Path:
    path = out / f"{name}.tdgn"
    save_params(path, state.params.detach(), model_cfg, extra)
    if state.D is not None:
        save_archive(out / f"{name}.dt", "dt/1", state.D.numpy())
    return path


def run_pretrain(cfg: ExperimentConfig, manifest: DatasetManifest, out, variant: str = "move",
                 init: Optional[TDGNParams] = None, max_steps: Optional[int] = None) -> Path:
    if variant not in PRETRAIN_VARIANTS:
        raise ConfigError(f"unknown pretraining variant {variant!r}")
    out = Path(out)
    pc = replace(cfg.pretrain, variant=PRETRAIN_VARIANTS[variant])
    ctx = make_context(cfg, manifest)
    init = init if init is not None else init_params(cfg.model, cfg.seed)
    name = f"pretrain_{variant}"
    st = pretrain(manifest.split("train"), pc, cfg.model, ctx, init, out, name, max_steps)
    return _final(st, out, name, cfg.model, {"variant": variant, "iterations": st.step})


def run_meta(cfg: ExperimentConfig, manifest: DatasetManifest, out, init: TDGNParams,
             variant: str = "metadance", name: Optional[str] = None,
             sampler: Optional[SamplerConfig] = None, max_steps: Optional[int] = None) -> Path:
    if variant not in META_VARIANTS:
        raise ConfigError(f"unknown meta-training variant {variant!r}")
    algo, v = META_VARIANTS[variant]
    mc = replace(cfg.meta, algorithm=algo, variant=v)
    ctx = make_context(cfg, manifest)
    name = name or f"meta_{variant}"
    st = meta_train(manifest.split("train"), mc, sampler or cfg.sampler, cfg.model, ctx, init,
                    Path(out), name, max_steps)
    return _final(st, Path(out), name, cfg.model,
                  {"variant": variant, "tasks": st.tasks_seen, "K": (sampler or cfg.sampler).K})


def episodes_for(cfg: ExperimentConfig, manifest: DatasetManifest, K: int,
                 episodes_file=None) -> List[Episode]:
    test = manifest.split("test")
    if episodes_file is not None:
        eps = load_episodes(episodes_file, manifest)
        return [e for e in eps if e.K == K]
    sc = SamplerConfig(K=K, interval=cfg.eval.interval,
                       episode_query_len=cfg.eval.episode_query_len, seed=cfg.seed)
    return build_episodes(test, sc, cfg.eval.episodes_per_person)


def run_evaluation(cfg: ExperimentConfig, manifest: DatasetManifest, params: TDGNParams,
                   model_cfg: ModelConfig, shots, adapt_variant: str = "move", adapt: bool = True,
                   episodes_file=None, strip_dir=None, label: str = "",
                   workers: int = 1) -> List[MetricsRecord]:
    ctx = make_context(cfg, manifest)
    ecfg = cfg.eval.eval_config(adapt_variant, adapt)
    records = []
    for K in shots:
        eps = episodes_for(cfg, manifest, K, episodes_file)
        keep = cfg.eval.strips if strip_dir is not None else 0
        recs, kept = evaluate(params, eps, ctx, model_cfg, ecfg, keep_frames=keep, workers=workers)
        records += recs
        for ep, pred in zip(eps, kept):
            write_png(Path(strip_dir) / f"{label or 'strip'}_{ep.episode_id}.png",
                      episode_strip(ep, pred))
        log.info("%s K=%d: %d episodes", label, K, len(recs))
    return records


def ensure_dataset(cfg: ExperimentConfig, data_dir) -> DatasetManifest:
    data_dir = Path(data_dir)
    if (data_dir / "manifest.json").exists():
        return DatasetManifest.load(data_dir)
    return ds.build_dataset(cfg.data, data_dir)
