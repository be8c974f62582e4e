"""K-shot temporal task and meta-test episode sampling, and move decomposition."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from .core_types import DancingMove, Sequence, Task, task_to_record, validate_task
from .errors import ConfigError, LengthError, NoEligibleClipError

RngLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 5
    interval: int = 5
    query_len: Optional[int] = None  # None -> K - 1, same move count as the support
    episode_query_len: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.interval < 0:
            raise ConfigError("interval must be >= 0")
        if self.query_len is not None and self.query_len < 1:
            raise ConfigError("query_len must be >= 1")
        if self.episode_query_len < 2:
            raise ConfigError("episode_query_len must be >= 2")

    @property
    def support_len(self) -> int:
        return self.K - 1

    @property
    def query_length(self) -> int:
        return self.K - 1 if self.query_len is None else self.query_len

    def window(self, query_len: Optional[int] = None) -> int:
        """Frames a clip needs: reference + support + interval + query."""
        q = self.query_length if query_len is None else query_len
        return self.K + self.interval + q

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Episode:
    task: Task
    episode_id: str

    @property
    def K(self) -> int:
        return self.task.K

    @property
    def person_id(self) -> str:
        return self.task.person_id


def as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def move_index_pairs(n: int) -> List[tuple]:
    """0-based (a, a+1) pairs covering n frames; odd n gets an overlapping tail pair."""
    if n < 2:
        raise LengthError(f"a move needs two frames, sequence has {n}")
    pairs = [(i, i + 1) for i in range(0, n - 1, 2)]
    if n % 2:
        pairs.append((n - 2, n - 1))
    return pairs


def moves_of(seq: Sequence) -> List[DancingMove]:
    """Disjoint consecutive pairs; an odd tail frame is covered by an overlapping last move."""
    out = []
    for a, b in move_index_pairs(len(seq)):
        out.append(DancingMove(
            frames=(seq.frames[a], seq.frames[b]),
            poses=(seq.poses[a], seq.poses[b]),
            indices=(seq.start_index + a, seq.start_index + b)))
    return out


# ---------------------------------------------------------------------------
# building tasks from clip data


def _sequence(data, start: int, length: int, with_flow: bool) -> Sequence:
    frames = tuple(data.frame(t) for t in range(start, start + length))
    poses = tuple(data.pose(t) for t in range(start, start + length))
    flows = None
    if with_flow and data.flows is not None:
        flows = tuple(data.flow(t) for t in range(start, start + length - 1))
    return Sequence(frames, poses, start, flows)


def make_task(manifest, clip_id: str, reference_index: int, support_len: int,
              query_start: int, query_len: int, interval: int) -> Task:
    entry = manifest.clip(clip_id)
    data = manifest.clip_data(clip_id)
    if query_start + query_len > len(data):
        raise LengthError(f"window exceeds clip {clip_id} of length {len(data)}")
    with_flow = manifest.has_flow
    support = _sequence(data, reference_index + 1, support_len, with_flow)
    query = _sequence(data, query_start, query_len, with_flow)
    pid = entry["person_id"]
    return Task(reference=(data.frame(reference_index), data.pose(reference_index)),
                support=support, query=query, person_id=pid, clip_id=clip_id,
                reference_index=reference_index, interval=interval,
                sources=((pid, clip_id),))


def eligible_clips(manifest, need: int, person_id: Optional[str] = None) -> List[dict]:
    return [c for c in manifest.clips
            if c["length"] >= need and (person_id is None or c["person_id"] == person_id)]


def _draw(manifest, cfg: SamplerConfig, rng, query_len: int, person_id=None) -> Task:
    need = cfg.window(query_len)
    clips = eligible_clips(manifest, need, person_id)
    if not clips:
        who = f" for person {person_id}" if person_id else ""
        raise NoEligibleClipError(f"no clip{who} has the {need} frames a K={cfg.K} task needs")
    entry = clips[int(rng.integers(len(clips)))]
    n = entry["length"]
    ref = int(rng.integers(0, n - need + 1))
    q_lo = ref + cfg.K + cfg.interval
    q = int(rng.integers(q_lo, n - query_len + 1))
    return make_task(manifest, entry["clip_id"], ref, cfg.support_len, q, query_len, cfg.interval)


def sample_task(manifest, cfg: SamplerConfig, rng: RngLike = None) -> Task:
    """Uniform eligible clip, then uniform reference offset and query start."""
    return _draw(manifest, cfg, as_rng(cfg.seed if rng is None else rng), cfg.query_length)


def sample_episode(manifest, cfg: SamplerConfig, person_id: str, rng: RngLike = None,
                   episode_id: str = "") -> Episode:
    if person_id not in manifest.person_ids:
        raise NoEligibleClipError(f"person {person_id} is not in this split")
    task = _draw(manifest, cfg, as_rng(cfg.seed if rng is None else rng),
                 cfg.episode_query_len, person_id)
    return Episode(task, episode_id or f"{person_id}_e")


def build_episodes(manifest, cfg: SamplerConfig, per_person: int = 20,
                   persons: Optional[Iterable[str]] = None) -> List[Episode]:
    """``per_person`` episodes for every person, each from its own derived rng."""
    out = []
    persons = list(persons) if persons is not None else manifest.person_ids
    for pi, pid in enumerate(persons):
        for e in range(per_person):
            rng = np.random.default_rng([cfg.seed, cfg.K, pi, e])
            out.append(sample_episode(manifest, cfg, pid, rng, f"{pid}_k{cfg.K}_e{e:02d}"))
    return out


# ---------------------------------------------------------------------------
# episode files


def episode_records(episodes: List[Episode]) -> List[dict]:
    return [dict(task_to_record(ep.task), episode_id=ep.episode_id, K=ep.K) for ep in episodes]


def save_episodes(path, episodes: List[Episode]) -> None:
    from .io import atomic_write_bytes
    payload = {"format": "movesynth-episodes/1", "episodes": episode_records(episodes)}
    atomic_write_bytes(path, json.dumps(payload, indent=1, sort_keys=True).encode())


def task_from_record(manifest, rec: dict) -> Task:
    task = make_task(manifest, rec["clip_id"], rec["reference_index"], rec["support"]["length"],
                     rec["query"]["start"], rec["query"]["length"], rec.get("interval", 0))
    if task.person_id != rec["person_id"]:
        raise ValueError(f"clip {rec['clip_id']} belongs to {task.person_id}, "
                         f"record says {rec['person_id']}")
    if task.support.start_index != rec["support"]["start"]:
        raise ValueError("support start does not follow the reference frame")
    validate_task(task)
    return task


def load_episodes(path, manifest) -> List[Episode]:
    with open(Path(path)) as fh:
        d = json.load(fh)
    return [Episode(task_from_record(manifest, r), r["episode_id"]) for r in d["episodes"]]
