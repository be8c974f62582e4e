"""Domain value types: frames, pose maps, moves, sequences, tasks and flows.

Arrays are stored channel-last (H, W, C) as float32 and frozen after
construction, so instances can be shared freely between workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence as Seq

import numpy as np

from .errors import ShapeError, StructureError
from .skeleton import NUM_LIMBS

DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 32
POSE_CHANNELS = NUM_LIMBS + 1  # one channel per limb plus the silhouette


def _frozen(a, dtype=np.float32) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"frame must be HxWx3, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("frame contains non-finite values")
        if px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class PoseMap:
    """Rasterized limb channels plus the silhouette channel, and 2-D keypoints."""

    channels: np.ndarray
    keypoints: np.ndarray  # (J, 3): x, y, visible

    def __post_init__(self):
        ch = _frozen(self.channels)
        kp = _frozen(self.keypoints, np.float64)
        if ch.ndim != 3:
            raise ShapeError(f"pose map must be HxWxC, got {ch.shape}")
        if not np.all(np.isfinite(ch)) or ch.min(initial=0.0) < 0.0 or ch.max(initial=0.0) > 1.0:
            raise ValueError("pose channels must be finite and in [0, 1]")
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ShapeError(f"keypoints must be (J, 3), got {kp.shape}")
        h, w = ch.shape[:2]
        vis = kp[:, 2] > 0
        xs, ys = kp[vis, 0], kp[vis, 1]
        if np.any(xs < 0) or np.any(xs >= w) or np.any(ys < 0) or np.any(ys >= h):
            raise ValueError("visible keypoints must lie inside the frame")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "keypoints", kp)

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]

    @property
    def num_channels(self) -> int:
        return self.channels.shape[2]

    def __eq__(self, other):
        return (isinstance(other, PoseMap)
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.keypoints, other.keypoints))


@dataclass(frozen=True, eq=False)
class FlowField:
    """Backward flow on the grid of the later frame.

    ``flow[y, x] = (dx, dy)`` points from pixel (x, y) of frame t+1 to its
    source location in frame t, so ``warp(frame_t, flow)`` predicts frame t+1.
    """

    flow: np.ndarray
    occlusion_mask: np.ndarray  # 1 = valid

    def __post_init__(self):
        fl = _frozen(self.flow)
        m = _frozen(self.occlusion_mask)
        if fl.ndim != 3 or fl.shape[2] != 2:
            raise ShapeError(f"flow must be HxWx2, got {fl.shape}")
        if m.shape != fl.shape[:2]:
            raise ShapeError("occlusion mask must match flow resolution")
        if not np.all(np.isfinite(fl)):
            raise ValueError("flow contains non-finite values")
        if np.abs(fl).max(initial=0.0) > max(fl.shape[:2]):
            raise ValueError("flow magnitude exceeds frame size")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("occlusion mask must be binary")
        object.__setattr__(self, "flow", fl)
        object.__setattr__(self, "occlusion_mask", m)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.ones((height, width)))

    def __eq__(self, other):
        return (isinstance(other, FlowField)
                and np.array_equal(self.flow, other.flow)
                and np.array_equal(self.occlusion_mask, other.occlusion_mask))


@dataclass(frozen=True)
class DancingMove:
    frames: tuple
    poses: tuple
    indices: tuple

    def __post_init__(self):
        if len(self.frames) != 2 or len(self.poses) != 2 or len(self.indices) != 2:
            raise StructureError("a move holds exactly two frames")
        if self.indices[1] != self.indices[0] + 1:
            raise StructureError(f"move indices not consecutive: {self.indices}")


@dataclass(frozen=True)
class Sequence:
    """Contiguous run of frames and poses taken from one clip.

    ``flows[i]`` relates ``frames[i]`` to ``frames[i + 1]``; it is ``None``
    when the source data carries no optical flow.
    """

    frames: tuple
    poses: tuple
    start_index: int
    flows: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.flows is not None:
            object.__setattr__(self, "flows", tuple(self.flows))
        if len(self.frames) < 1:
            raise StructureError("sequence must contain at least one frame")
        if len(self.frames) != len(self.poses):
            raise StructureError("frames and poses differ in length")
        if self.flows is not None and len(self.flows) != len(self.frames) - 1:
            raise StructureError("a sequence of n frames carries n-1 flows")

    def __len__(self):
        return len(self.frames)

    @property
    def indices(self) -> range:
        return range(self.start_index, self.start_index + len(self.frames))

    @property
    def end_index(self) -> int:
        """Index one past the last frame."""
        return self.start_index + len(self.frames)

    def frame_array(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])

    def pose_array(self) -> np.ndarray:
        return np.stack([p.channels for p in self.poses])


@dataclass(frozen=True)
class Task:
    reference: tuple  # (Frame, PoseMap)
    support: Sequence
    query: Sequence
    person_id: str
    clip_id: str
    reference_index: int
    interval: int = 0
    # person/clip each window came from; equal to person_id/clip_id unless corrupted
    sources: tuple = field(default=None, compare=False)

    @property
    def K(self) -> int:
        return len(self.support) + 1


def validate_task(task: Task, height: Optional[int] = None, width: Optional[int] = None,
                  pose_channels: Optional[int] = None) -> None:
    """Raise StructureError naming the first violated task invariant."""
    ref_frame, ref_pose = task.reference
    if not isinstance(ref_frame, Frame) or not isinstance(ref_pose, PoseMap):
        raise StructureError("reference must be a (Frame, PoseMap) pair")
    if task.sources is not None:
        persons = {p for p, _ in task.sources}
        clips = {c for _, c in task.sources}
        if persons != {task.person_id}:
            raise StructureError(f"task mixes persons: {sorted(persons | {task.person_id})}")
        if clips != {task.clip_id}:
            raise StructureError(f"task mixes clips: {sorted(clips | {task.clip_id})}")
    if task.support.start_index != task.reference_index + 1:
        raise StructureError("reference frame must immediately precede the support sequence")
    if task.query.start_index < task.support.end_index:
        raise StructureError("query overlaps the support sequence")
    if task.query.start_index < task.support.end_index + task.interval:
        raise StructureError(
            f"query starts {task.query.start_index - task.support.end_index} frames after "
            f"support, fewer than the interval {task.interval}")
    h = height if height is not None else ref_frame.height
    w = width if width is not None else ref_frame.width
    c = pose_channels if pose_channels is not None else ref_pose.num_channels
    for name, seq in (("support", task.support), ("query", task.query)):
        frames = (ref_frame,) + seq.frames
        poses = (ref_pose,) + seq.poses
        for f in frames:
            if (f.height, f.width) != (h, w):
                raise StructureError(f"{name}: frame resolution {f.height}x{f.width} != {h}x{w}")
        for p in poses:
            if (p.height, p.width, p.num_channels) != (h, w, c):
                raise StructureError(f"{name}: pose map shape mismatch")
        if seq.flows is not None:
            for fl in seq.flows:
                if fl.flow.shape[:2] != (h, w):
                    raise StructureError(f"{name}: flow resolution mismatch")


def task_to_record(task: Task) -> dict:
    """Index-only manifest record; frames are recovered from the dataset."""
    return {
        "person_id": task.person_id,
        "clip_id": task.clip_id,
        "reference_index": task.reference_index,
        "support": {"start": task.support.start_index, "length": len(task.support)},
        "query": {"start": task.query.start_index, "length": len(task.query)},
        "interval": task.interval,
    }


def tasks_equal(a: Task, b: Task) -> bool:
    """Field-by-field equality including all pixel arrays."""
    if (a.person_id, a.clip_id, a.reference_index, a.interval) != \
            (b.person_id, b.clip_id, b.reference_index, b.interval):
        return False
    if a.reference[0] != b.reference[0] or a.reference[1] != b.reference[1]:
        return False
    for sa, sb in ((a.support, b.support), (a.query, b.query)):
        if sa.start_index != sb.start_index or len(sa) != len(sb):
            return False
        if any(x != y for x, y in zip(sa.frames, sb.frames)):
            return False
        if any(x != y for x, y in zip(sa.poses, sb.poses)):
            return False
        if (sa.flows is None) != (sb.flows is None):
            return False
        if sa.flows is not None and any(x != y for x, y in zip(sa.flows, sb.flows)):
            return False
    return True


def stack_frames(frames: Seq[Frame]) -> np.ndarray:
    return np.stack([f.pixels for f in frames])
