"""Bi-level training: support-set adaptation, query-driven outer updates, pretraining, Reptile.

Parameters are plain name->tensor dicts, so the same routines drive the full
generator and the one-scalar surrogates used to check the update algebra.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .core_types import Task
from .errors import ConfigError, EmptyError, NonFiniteGradError
from .io import load_archive, save_archive
from .losses import LossContext, discriminator_sequence_loss, sequence_loss
from .model import ModelConfig, TDGNParams, synthesize_sequence
from .sampling import SamplerConfig, sample_task

log = logging.getLogger(__name__)

# variant -> (synthesis mode, loss mode, drop the temporal term)
VARIANTS = {
    "move": ("move", "move", False),
    "td_free": ("move", "move", True),
    "frame": ("frame", "frame", True),
}


def _variant(name: str):
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return VARIANTS[name]


@dataclass
class MetaConfig:
    alpha: float = 1e-4
    beta: float = 5e-5
    inner_steps: int = 3
    tasks_per_batch: int = 4
    total_tasks: int = 3000
    second_order: bool = True
    optimizer: str = "adam"  # or "sgd"
    clip_norm: Optional[float] = 10.0
    d_lr: float = 5e-5
    variant: str = "move"
    algorithm: str = "maml"  # or "reptile"
    reptile_beta: float = 1.0
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("step sizes must be nonnegative")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.tasks_per_batch < 1:
            raise ConfigError("tasks_per_batch must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.algorithm not in ("maml", "reptile"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        _variant(self.variant)

    @property
    def outer_steps(self) -> int:
        return self.total_tasks // self.tasks_per_batch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PretrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    d_lr: float = 1e-4
    moves: int = 1
    variant: str = "move"
    clip_norm: Optional[float] = 10.0
    checkpoint_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.moves < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1 and moves >= 1 required")
        _variant(self.variant)

    def lr_at(self, it: int) -> float:
        """Constant, then linear decay towards zero over the second half."""
        half = self.iterations // 2
        if it < half:
            return self.lr
        return self.lr * (self.iterations - it) / max(self.iterations - half, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# tensors of a task


def _img(frames, dtype):
    return [torch.from_numpy(np.ascontiguousarray(f.pixels.transpose(2, 0, 1)))[None].to(dtype)
            for f in frames]


def _pose(poses, dtype):
    return [torch.from_numpy(np.ascontiguousarray(p.channels.transpose(2, 0, 1)))[None].to(dtype)
            for p in poses]


def _flow(flows, dtype):
    if flows is None:
        return None
    return [torch.from_numpy(np.ascontiguousarray(f.flow.transpose(2, 0, 1)))[None].to(dtype)
            for f in flows]


@dataclass
class SeqTensors:
    frames: List[torch.Tensor]
    poses: List[torch.Tensor]
    flows: Optional[List[torch.Tensor]]
    masks: Optional[List[torch.Tensor]] = None


@dataclass
class TaskTensors:
    I0: torch.Tensor
    P0: torch.Tensor
    support: SeqTensors
    query: SeqTensors

    @classmethod
    def from_task(cls, task: Task, dtype=torch.float32) -> "TaskTensors":
        def seq(s):
            masks = None
            if s.flows is not None:
                masks = [torch.from_numpy(np.array(f.occlusion_mask))[None, None].to(dtype)
                         for f in s.flows]
            return SeqTensors(_img(s.frames, dtype), _pose(s.poses, dtype), _flow(s.flows, dtype),
                              masks)
        f0, p0 = task.reference
        return cls(_img([f0], dtype)[0], _pose([p0], dtype)[0], seq(task.support), seq(task.query))


def sequence_task_loss(params, I0, P0, seq: SeqTensors, ctx: LossContext, cfg: ModelConfig,
                       variant: str = "move", return_frames: bool = False):
    """Synthesize ``seq`` from its poses and score it against its frames."""
    synth_mode, loss_mode, drop_t = _variant(variant)
    w = ctx.weights.without_temporal() if drop_t else ctx.weights
    frames = synthesize_sequence(I0, P0, seq.poses, params, cfg, synth_mode)
    if len(frames) < 2 and loss_mode == "move":
        loss = sequence_loss(frames, seq.frames, None, ctx, w, "frame")
    else:
        loss = sequence_loss(frames, seq.frames, seq.flows, ctx, w, loss_mode)
    return (loss, frames) if return_frames else loss


def support_loss(params, tt: TaskTensors, ctx: LossContext, cfg: ModelConfig,
                 variant: str = "move"):
    """Sum of move losses over the support sequence, chained from the reference pair."""
    return sequence_task_loss(params, tt.I0, tt.P0, tt.support, ctx, cfg, variant)


def query_loss(params, tt: TaskTensors, ctx: LossContext, cfg: ModelConfig,
               variant: str = "move", return_frames: bool = False):
    return sequence_task_loss(params, tt.I0, tt.P0, tt.query, ctx, cfg, variant, return_frames)


# ---------------------------------------------------------------------------
# update algebra


def _check_finite(grads, where: str):
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradError(f"non-finite gradient in {where}")


def clip_factor(grads, max_norm: Optional[float]):
    if not max_norm:
        return 1.0
    norm = torch.sqrt(sum((g * g).sum() for g in grads))
    return torch.clamp(max_norm / (norm + 1e-12), max=1.0)


def inner_update(params: Dict[str, torch.Tensor], loss_fn: Callable, alpha: float, steps: int,
                 second_order: bool = True, clip_norm: Optional[float] = None,
                 losses: Optional[list] = None) -> TDGNParams:
    """``steps`` plain gradient steps on ``loss_fn``; never modifies ``params``.

    With ``second_order`` the graph through every step is kept, so gradients
    of a later loss w.r.t. the original parameters include the curvature terms.
    """
    if steps < 1:
        raise ConfigError("inner_update needs at least one step")
    cur = TDGNParams(params)
    names = list(cur)
    for _ in range(steps):
        loss = loss_fn(cur)
        if not torch.isfinite(loss):
            raise NonFiniteGradError(f"non-finite inner loss {float(loss)}")
        if losses is not None:
            losses.append(float(loss.detach()))
        grads = torch.autograd.grad(loss, [cur[k] for k in names], create_graph=second_order,
                                    allow_unused=True)
        grads = [torch.zeros_like(cur[k]) if g is None else g for k, g in zip(names, grads)]
        _check_finite(grads, "inner update")
        c = clip_factor(grads, clip_norm)
        if not second_order:
            grads = [g.detach() for g in grads]
            c = c.detach() if torch.is_tensor(c) else c
        cur = TDGNParams((k, cur[k] - alpha * c * g) for k, g in zip(names, grads))
    return cur


def leaf_copy(params) -> TDGNParams:
    return TDGNParams((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())


def adapt(params, tt: TaskTensors, ctx: LossContext, cfg: ModelConfig, alpha: float = 1e-4,
          steps: int = 3, variant: str = "move", clip_norm: Optional[float] = 10.0) -> TDGNParams:
    """Tune a copy of ``params`` on the support sequence; returns detached parameters."""
    theta = leaf_copy(params)
    out = inner_update(theta, lambda p: support_loss(p, tt, ctx, cfg, variant), alpha, steps,
                       second_order=False, clip_norm=clip_norm)
    return out.detach()


# ---------------------------------------------------------------------------
# training state


def _make_optimizer(kind: str, tensors, lr: float):
    if kind == "sgd":
        return torch.optim.SGD(tensors, lr=lr)
    return torch.optim.Adam(tensors, lr=lr)


@dataclass
class TrainState:
    params: TDGNParams
    D: Optional[TDGNParams] = None
    optimizer: str = "adam"
    lr: float = 5e-5
    d_lr: float = 5e-5
    step: int = 0
    tasks_seen: int = 0
    seed: int = 0
    _opt: object = field(default=None, repr=False)
    _dopt: object = field(default=None, repr=False)

    def __post_init__(self):
        self.params = TDGNParams((k, v.detach().clone().requires_grad_(True))
                                 for k, v in self.params.items())
        self._opt = _make_optimizer(self.optimizer, list(self.params.values()), self.lr)
        if self.D is not None:
            self.D = TDGNParams((k, v.detach().clone().requires_grad_(True))
                                for k, v in self.D.items())
            self._dopt = torch.optim.Adam(list(self.D.values()), lr=self.d_lr)

    def set_lr(self, lr: float, d_lr: Optional[float] = None):
        for g in self._opt.param_groups:
            g["lr"] = lr
        if self._dopt is not None and d_lr is not None:
            for g in self._dopt.param_groups:
                g["lr"] = d_lr

    # -- optimizer plumbing
    def apply_gradients(self, grads: Dict[str, torch.Tensor], clip_norm: Optional[float]):
        gl = [grads[k] for k in self.params]
        _check_finite(gl, "outer update")
        c = clip_factor(gl, clip_norm)
        for k, g in zip(self.params, gl):
            self.params[k].grad = (g * c).detach().to(self.params[k].dtype)
        self._opt.step()
        self._opt.zero_grad(set_to_none=True)

    def apply_d_loss(self, loss: torch.Tensor, clip_norm: Optional[float]):
        names = list(self.D)
        grads = torch.autograd.grad(loss, [self.D[k] for k in names], allow_unused=True)
        grads = [torch.zeros_like(self.D[k]) if g is None else g for k, g in zip(names, grads)]
        _check_finite(grads, "discriminator update")
        c = clip_factor(grads, clip_norm)
        for k, g in zip(names, grads):
            self.D[k].grad = (g * c).detach()
        self._dopt.step()
        self._dopt.zero_grad(set_to_none=True)

    # -- persistence
    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"theta.{k}": v.detach().numpy() for k, v in self.params.items()}
        if self.D is not None:
            out.update({f"D.{k}": v.detach().numpy() for k, v in self.D.items()})
        for tag, opt, group in (("theta", self._opt, self.params), ("D", self._dopt, self.D)):
            if opt is None:
                continue
            for k, v in group.items():
                st = opt.state.get(v, {})
                for sk, sv in st.items():
                    out[f"opt.{tag}.{sk}.{k}"] = np.asarray(
                        sv.detach().numpy() if torch.is_tensor(sv) else sv, dtype=np.float32)
        return out

    def save(self, path, config: Optional[dict] = None, extra: Optional[dict] = None):
        meta = {"optimizer": self.optimizer, "lr": self.lr, "d_lr": self.d_lr, "step": self.step,
                "tasks_seen": self.tasks_seen, "seed": self.seed, "has_D": self.D is not None}
        meta.update(extra or {})
        save_archive(path, "train/1", self.tensors(), config=config, extra=meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        header, arrays = load_archive(path, kind="train/1")
        ex = header["extra"]
        theta = TDGNParams((k[6:], torch.from_numpy(v)) for k, v in arrays.items()
                           if k.startswith("theta."))
        D = None
        if ex.get("has_D"):
            D = TDGNParams((k[2:], torch.from_numpy(v)) for k, v in arrays.items()
                           if k.startswith("D."))
        st = cls(theta, D, ex["optimizer"], ex["lr"], ex["d_lr"], ex["step"], ex["tasks_seen"],
                 ex["seed"])
        states: Dict[tuple, dict] = {}
        for name, a in arrays.items():
            if name.startswith("opt."):
                _, tag, sk, k = name.split(".", 3)
                states.setdefault((tag, k), {})[sk] = (
                    torch.tensor(a) if a.ndim == 0 else torch.from_numpy(a.copy()))
        for (tag, k), entry in states.items():
            opt, group = (st._opt, st.params) if tag == "theta" else (st._dopt, st.D)
            opt.state[group[k]] = entry
        return st


# ---------------------------------------------------------------------------
# one outer step


def meta_gradient(params: TDGNParams, tasks, support_fn: Callable, query_fn: Callable,
                  cfg: MetaConfig):
    """Summed query-loss gradient w.r.t. the pre-adaptation parameters.

    ``support_fn(p, task)`` returns a scalar; ``query_fn(p, task)`` returns
    ``(scalar, aux)``. Returns (grads, mean support loss, mean query loss, auxes).
    """
    names = list(params)
    acc = {k: torch.zeros_like(v) for k, v in params.items()}
    s_losses, q_losses, auxes = [], [], []
    for task in tasks:
        trace: list = []
        adapted = inner_update(params, lambda p: support_fn(p, task), cfg.alpha, cfg.inner_steps,
                               cfg.second_order, cfg.clip_norm, trace)
        q, aux = query_fn(adapted, task)
        if not torch.isfinite(q):
            raise NonFiniteGradError(f"non-finite query loss {float(q.detach())}")
        grads = torch.autograd.grad(q, [params[k] for k in names], allow_unused=True)
        for k, g in zip(names, grads):
            if g is not None:
                acc[k] += g.detach()
        s_losses.append(trace[0])
        q_losses.append(float(q.detach()))
        auxes.append(aux)
    return acc, float(np.mean(s_losses)), float(np.mean(q_losses)), auxes


def outer_step(state: TrainState, tasks, cfg: MetaConfig, support_fn: Callable,
               query_fn: Callable, d_loss_fn: Optional[Callable] = None) -> dict:
    """MAML outer update of ``state`` in place; then one discriminator step if given."""
    if not tasks:
        raise EmptyError("outer_step needs at least one task")
    grads, s, q, auxes = meta_gradient(state.params, tasks, support_fn, query_fn, cfg)
    state.apply_gradients(grads, cfg.clip_norm)
    d = float("nan")
    if d_loss_fn is not None and state.D is not None:
        dl = d_loss_fn(state.D, tasks, auxes)
        state.apply_d_loss(dl, cfg.clip_norm)
        d = float(dl.detach())
    state.step += 1
    state.tasks_seen += len(tasks)
    return {"support_loss": s, "query_loss": q, "d_loss": d}


def reptile_step(state: TrainState, tasks, cfg: MetaConfig, loss_fn: Callable) -> dict:
    """theta <- theta + beta_r * mean_i(theta'_i - theta), theta'_i fine-tuned on task i."""
    if not tasks:
        raise EmptyError("reptile_step needs at least one task")
    base = state.params
    delta = {k: torch.zeros_like(v) for k, v in base.items()}
    losses = []
    for task in tasks:
        trace: list = []
        adapted = inner_update(leaf_copy(base), lambda p: loss_fn(p, task), cfg.alpha,
                               cfg.inner_steps, second_order=False, clip_norm=cfg.clip_norm,
                               losses=trace)
        for k in base:
            delta[k] += adapted[k].detach() - base[k].detach()
        losses.append(trace[0])
    with torch.no_grad():
        for k, v in base.items():
            v.add_(delta[k], alpha=cfg.reptile_beta / len(tasks))
    state.step += 1
    state.tasks_seen += len(tasks)
    return {"support_loss": float(np.mean(losses)), "query_loss": float("nan"),
            "d_loss": float("nan")}


# ---------------------------------------------------------------------------
# loops


CURVE_COLUMNS = ("step", "support_loss", "query_loss", "d_loss")


def _write_curve(path: Path, rows: List[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_COLUMNS})


def _read_curve(path: Path, upto: int) -> List[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) <= upto]


def _append_curve(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in CURVE_COLUMNS})


def _resume(out_dir: Optional[Path], name: str, fresh: Callable[[], TrainState]):
    if out_dir is not None and (out_dir / f"{name}.ckpt").exists():
        st = TrainState.load(out_dir / f"{name}.ckpt")
        rows = _read_curve(out_dir / f"{name}_curve.csv", st.step)
        _write_curve(out_dir / f"{name}_curve.csv", rows)
        log.info("resuming %s at step %d", name, st.step)
        return st
    st = fresh()
    if out_dir is not None:
        _write_curve(out_dir / f"{name}_curve.csv", [])
    return st


def _task_batch(manifest, sampler: SamplerConfig, seed: int, step: int, n: int, dtype):
    rng = np.random.default_rng([seed, 104729, step])
    return [TaskTensors.from_task(sample_task(manifest, sampler, rng), dtype) for _ in range(n)]


def meta_train(manifest, cfg: MetaConfig, sampler: SamplerConfig, model_cfg: ModelConfig,
               ctx: LossContext, init: TDGNParams, out_dir=None, name: str = "meta",
               max_steps: Optional[int] = None, dtype=torch.float32) -> TrainState:
    """Bi-level (or Reptile) training over ``cfg.total_tasks`` sampled tasks.

    Tasks of outer step k come from an rng seeded by (seed, k), so a run
    resumed from any checkpoint continues exactly as the uninterrupted one.
    ``max_steps`` stops early (the state is still checkpointed).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _, _, drop_t = _variant(cfg.variant)
    use_d = ctx.D is not None and ctx.weights.temporal > 0 and not drop_t
    st = _resume(out, name, lambda: TrainState(init, ctx.D if use_d else None, cfg.optimizer,
                                               cfg.beta, cfg.d_lr, seed=cfg.seed))
    lctx = LossContext(ctx.fx, st.D, ctx.weights)

    def s_fn(p, tt):
        return support_loss(p, tt, lctx, model_cfg, cfg.variant)

    def q_fn(p, tt):
        loss, frames = query_loss(p, tt, lctx, model_cfg, cfg.variant, return_frames=True)
        return loss, [f.detach() for f in frames]

    def d_fn(D, tasks, auxes):
        total = 0.0
        for tt, fr in zip(tasks, auxes):
            total = total + discriminator_sequence_loss(fr, tt.query.frames, tt.query.flows, D)
        return total / len(tasks)

    def r_fn(p, tt):
        return (support_loss(p, tt, lctx, model_cfg, cfg.variant)
                + query_loss(p, tt, lctx, model_cfg, cfg.variant))

    target = cfg.outer_steps if max_steps is None else min(cfg.outer_steps, max_steps)
    ckpt = out / f"{name}.ckpt" if out is not None else None
    config = {"meta": cfg.to_dict(), "sampler": sampler.to_dict(), "model": model_cfg.to_dict(),
              "loss": ctx.weights.to_dict()}
    try:
        while st.step < target:
            tasks = _task_batch(manifest, sampler, cfg.seed, st.step, cfg.tasks_per_batch, dtype)
            if cfg.algorithm == "reptile":
                row = reptile_step(st, tasks, cfg, r_fn)
            else:
                row = outer_step(st, tasks, cfg, s_fn, q_fn, d_fn if use_d else None)
            row["step"] = st.step
            if out is not None:
                _append_curve(out / f"{name}_curve.csv", row)
                if st.step % cfg.checkpoint_every == 0 or st.step == target:
                    st.save(ckpt, config)
            if st.step % 10 == 0:
                log.info("%s step %d/%d support %.4f query %.4f", name, st.step, target,
                         row["support_loss"], row["query_loss"])
    except KeyboardInterrupt:
        if ckpt is not None:
            st.save(ckpt, config)
        raise
    return st


def _sample_pretrain_batch(manifest, cfg: PretrainConfig, it: int, dtype):
    """Per sample: a random clip, a random reference frame and a run of 2*moves frames."""
    rng = np.random.default_rng([cfg.seed, 15485863, it])
    n = 2 * cfg.moves
    clips = [c for c in manifest.clips if c["length"] >= n + 1]
    if not clips:
        raise EmptyError(f"no training clip has {n + 1} frames")
    I0, P0, frames, poses, flows = [], [], [[] for _ in range(n)], [[] for _ in range(n)], \
        [[] for _ in range(n - 1)]
    for _ in range(cfg.batch_size):
        c = clips[int(rng.integers(len(clips)))]
        data = manifest.clip_data(c["clip_id"])
        r = int(rng.integers(len(data)))
        s = int(rng.integers(len(data) - n + 1))
        I0.append(data.frames[r])
        P0.append(data.poses[r])
        for j in range(n):
            frames[j].append(data.frames[s + j])
            poses[j].append(data.poses[s + j])
        if data.flows is not None:
            for j in range(n - 1):
                flows[j].append(data.flows[s + j])

    def u8(a):
        return torch.from_numpy(np.stack(a).transpose(0, 3, 1, 2).astype(np.float32) / 255.0).to(dtype)

    fl = None
    if manifest.has_flow:
        fl = [torch.from_numpy(np.stack(f).transpose(0, 3, 1, 2).copy()).to(dtype) for f in flows]
    return u8(I0), u8(P0), SeqTensors([u8(f) for f in frames], [u8(p) for p in poses], fl)


def pretrain(manifest, cfg: PretrainConfig, model_cfg: ModelConfig, ctx: LossContext,
             init: TDGNParams, out_dir=None, name: str = "pretrain",
             max_steps: Optional[int] = None, dtype=torch.float32) -> TrainState:
    """Plain training on random moves, generator and discriminator updated jointly."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _, _, drop_t = _variant(cfg.variant)
    use_d = ctx.D is not None and ctx.weights.temporal > 0 and not drop_t
    st = _resume(out, name, lambda: TrainState(init, ctx.D if use_d else None, "adam", cfg.lr,
                                               cfg.d_lr, seed=cfg.seed))
    lctx = LossContext(ctx.fx, st.D, ctx.weights)
    target = cfg.iterations if max_steps is None else min(cfg.iterations, max_steps)
    ckpt = out / f"{name}.ckpt" if out is not None else None
    config = {"pretrain": cfg.to_dict(), "model": model_cfg.to_dict(),
              "loss": ctx.weights.to_dict()}
    names = list(st.params)
    try:
        while st.step < target:
            it = st.step
            I0, P0, seq = _sample_pretrain_batch(manifest, cfg, it, dtype)
            st.set_lr(cfg.lr_at(it), cfg.d_lr * cfg.lr_at(it) / cfg.lr if cfg.lr else 0.0)
            loss, frames = sequence_task_loss(st.params, I0, P0, seq, lctx, model_cfg,
                                              cfg.variant, return_frames=True)
            if not torch.isfinite(loss):
                raise NonFiniteGradError(f"non-finite pretraining loss at iteration {it}")
            grads = torch.autograd.grad(loss, [st.params[k] for k in names], allow_unused=True)
            grads = {k: torch.zeros_like(st.params[k]) if g is None else g
                     for k, g in zip(names, grads)}
            st.apply_gradients(grads, cfg.clip_norm)
            d = float("nan")
            if use_d:
                dl = discriminator_sequence_loss(frames, seq.frames, seq.flows, st.D)
                st.apply_d_loss(dl, cfg.clip_norm)
                d = float(dl.detach())
            st.step += 1
            row = {"step": st.step, "support_loss": float(loss.detach()), "query_loss": float("nan"),
                   "d_loss": d}
            if out is not None:
                _append_curve(out / f"{name}_curve.csv", row)
                if st.step % cfg.checkpoint_every == 0 or st.step == target:
                    st.save(ckpt, config)
            if st.step % 50 == 0:
                log.info("%s iteration %d/%d loss %.4f d %.4f", name, st.step, target,
                         row["support_loss"], d)
    except KeyboardInterrupt:
        if ckpt is not None:
            st.save(ckpt, config)
        raise
    return st
