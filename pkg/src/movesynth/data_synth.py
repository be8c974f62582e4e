"""Procedural stick-figure dancers with exact pose maps and optical flow."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from . import io as mio
from . import skeleton as sk
from .core_types import DEFAULT_HEIGHT, DEFAULT_WIDTH, FlowField, Frame, PoseMap
from .errors import ConfigError, EmptyClipError, LengthError, OutOfFrameError

log = logging.getLogger(__name__)

BACKGROUND = 0.5
SUPERSAMPLE = 2
POSE_RADIUS = 1.0  # appearance-free limb radius used in pose maps (reference scale)
# flow pixels stay valid while at most this bilinear weight samples other labels in frame t
FOOTPRINT_TOLERANCE = 0.25
# frozen-frame rule: STATIC_RUN steps below MOTION_THRESHOLD px of mean joint motion
STATIC_RUN = 5
MOTION_THRESHOLD = 0.5

# amplitude (rad) of each limb's angle oscillation at full motion energy
_LIMB_AMPLITUDE = np.array([0.15, 0.25, 1.1, 0.9, 1.1, 0.9, 0.35, 0.45, 0.35, 0.45])
_MAX_RADIUS = np.array([5.0, 4.0, 2.5, 2.5, 2.5, 2.5, 3.0, 3.0, 3.0, 3.0])


def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class PersonSpec:
    limb_lengths: tuple
    limb_widths: tuple  # capsule radii
    limb_colors: tuple  # per-limb RGB
    torso_anchor: tuple  # rest pelvis position (x, y)
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.limb_lengths, dtype=np.float64)

    @property
    def radii(self) -> np.ndarray:
        return np.asarray(self.limb_widths, dtype=np.float64)

    @property
    def colors(self) -> np.ndarray:
        return np.asarray(self.limb_colors, dtype=np.float64)


def _template(height: int, width: int):
    s = sk.reference_scale(height, width)
    lengths = tuple(float(v) for v in sk.REFERENCE_LENGTHS * s)
    anchor = (width / 2.0 - 0.5, 0.45 * height)
    return s, lengths, anchor


def make_identity(seed: int, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> PersonSpec:
    """Random appearance: limb colors and thicknesses.

    Body proportions come from a shared template so that pose maps depend on
    the pose alone.
    """
    rng = np.random.default_rng(_seed_int(seed, 101))
    s, lengths, anchor = _template(height, width)
    lo = np.array([3.5, 2.8, 1.4, 1.2, 1.4, 1.2, 1.8, 1.6, 1.8, 1.6])
    radii = rng.uniform(lo, _MAX_RADIUS) * s

    def color():
        while True:
            c = rng.uniform(0.0, 1.0, 3)
            if np.abs(c - BACKGROUND).max() > 0.3:
                return c
    shirt, sleeve, pants, shoes, skin = color(), color(), color(), color(), color()
    colors = [shirt, skin, sleeve, skin, sleeve, skin, pants, shoes, pants, shoes]
    return PersonSpec(
        limb_lengths=lengths,
        limb_widths=tuple(float(r) for r in radii),
        limb_colors=tuple(tuple(float(v) for v in c) for c in colors),
        torso_anchor=anchor,
        height=height,
        width=width,
    )


@dataclass(frozen=True)
class MotionSpec:
    amplitudes: np.ndarray  # (POSE_STATE_SIZE, n_harmonics); root rows in pixels
    frequencies: np.ndarray  # cycles per frame
    phases: np.ndarray
    length: int

    def pose_state(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        arg = 2 * np.pi * self.frequencies[None] * t[..., None, None] + self.phases[None]
        return (self.amplitudes[None] * np.sin(arg)).sum(-1).reshape(t.shape + (sk.POSE_STATE_SIZE,))

    def trajectory(self) -> np.ndarray:
        """(T, POSE_STATE_SIZE) pose states for every frame."""
        return self.pose_state(np.arange(self.length))


def figure_in_frame(joints, radii, height, width, margin=0.0) -> bool:
    for k, (_, a, b, _) in enumerate(sk.LIMBS):
        r = radii[k] + margin
        for j in (a, b):
            x, y = joints[j]
            if x - r < -0.5 or y - r < -0.5 or x + r > width - 0.5 or y + r > height - 0.5:
                return False
    return True


def longest_still_run(keypoints: np.ndarray, threshold: float = MOTION_THRESHOLD) -> int:
    """Longest run of consecutive steps whose mean joint displacement is below ``threshold``."""
    best = run = 0
    for still in mean_joint_displacement(keypoints) < threshold:
        run = run + 1 if still else 0
        best = max(best, run)
    return best


def make_motion(seed: int, length: int, amplitude_scale: float = 1.0,
                height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                n_harmonics: int = 2) -> MotionSpec:
    """Sum-of-sinusoids joint trajectories that keep the widest figure in frame.

    Draws that would leave a frozen stretch (STATIC_RUN or more still frames)
    are redrawn, so filtering leaves generated clips whole. A zero
    ``amplitude_scale`` gives a constant pose.
    """
    if length < 2:
        raise LengthError(f"motion length must be >= 2, got {length}")
    rng = np.random.default_rng(_seed_int(seed, 202))
    s, lengths, anchor = _template(height, width)
    base = np.concatenate([_LIMB_AMPLITUDE, [1.5 * s, 1.5 * s]])
    radii = _MAX_RADIUS * s
    m = None
    for _ in range(20):
        amps = base[:, None] * rng.uniform(0.4, 1.0, (sk.POSE_STATE_SIZE, n_harmonics))
        amps = amps / np.sqrt(n_harmonics) * amplitude_scale
        freqs = rng.uniform(0.04, 0.09, (sk.POSE_STATE_SIZE, n_harmonics))
        phases = rng.uniform(0, 2 * np.pi, (sk.POSE_STATE_SIZE, n_harmonics))
        for _ in range(60):
            m = MotionSpec(amps, freqs, phases, int(length))
            joints = [sk.forward_kinematics(st, lengths, anchor) for st in m.trajectory()]
            if all(figure_in_frame(j, radii, height, width, 0.5) for j in joints):
                break
            amps = amps * 0.9
        if amplitude_scale == 0 or longest_still_run(np.stack(joints)) < STATIC_RUN:
            return m
    return m


def mean_joint_displacement(keypoints: np.ndarray) -> np.ndarray:
    """Per-step mean joint displacement for a (T, J, >=2) keypoint track."""
    kp = np.asarray(keypoints)[..., :2]
    return np.linalg.norm(np.diff(kp, axis=0), axis=-1).mean(-1)


def _subsample_grid(height, width, s=SUPERSAMPLE):
    offs = (np.arange(s) + 0.5) / s - 0.5
    ys = (np.arange(height)[:, None] + offs[None]).reshape(-1)
    xs = (np.arange(width)[:, None] + offs[None]).reshape(-1)
    return np.meshgrid(xs, ys)


def _box_down(a, s=SUPERSAMPLE):
    h, w = a.shape[0] // s, a.shape[1] // s
    return a.reshape(h, s, w, s, *a.shape[2:]).mean(axis=(1, 3))


def rasterize_pose(keypoints, height: int, width: int, visible=None) -> np.ndarray:
    """Anti-aliased limb channels plus the silhouette channel (H, W, L+1)."""
    kp = np.asarray(keypoints, dtype=np.float64)
    vis = np.ones(len(kp), bool) if visible is None else np.asarray(visible, bool)
    px, py = _subsample_grid(height, width)
    r = POSE_RADIUS * sk.reference_scale(height, width)
    chans = []
    for _, a, b, _ in sk.LIMBS:
        if vis[a] and vis[b]:
            d = sk.segment_distance(px, py, kp[a, 0], kp[a, 1], kp[b, 0], kp[b, 1])
            chans.append(_box_down((d <= r).astype(np.float64)))
        else:
            chans.append(np.zeros((height, width)))
    chans = np.stack(chans, -1)
    return np.concatenate([chans, chans.max(-1, keepdims=True)], -1)


def _keypoint_array(joints, height, width):
    vis = ((joints[:, 0] >= 0) & (joints[:, 0] < width) & (joints[:, 1] >= 0) & (joints[:, 1] < height))
    return np.concatenate([joints, vis[:, None].astype(np.float64)], 1)


def render_frame(person: PersonSpec, pose_state, strict: bool = True):
    """Render the figure and its pose map for one pose state.

    Raises OutOfFrameError in strict mode when any joint leaves the image.
    """
    h, w = person.height, person.width
    joints = sk.forward_kinematics(pose_state, person.lengths, person.torso_anchor)
    kp = _keypoint_array(joints, h, w)
    if strict and not kp[:, 2].all():
        raise OutOfFrameError("joint outside the image: " +
                              ", ".join(sk.JOINTS[j] for j in np.flatnonzero(kp[:, 2] == 0)))
    px, py = _subsample_grid(h, w)
    labels = sk.label_points(px, py, joints, person.radii)
    palette = np.concatenate([person.colors, np.full((1, 3), BACKGROUND)], 0)
    img = _box_down(palette[labels])  # label -1 indexes the background row
    frame = Frame(np.clip(img, 0.0, 1.0))
    pose = PoseMap(rasterize_pose(joints, h, w), kp)
    return frame, pose


def render_flow(person: PersonSpec, state_t, state_t1) -> FlowField:
    """Exact backward flow from frame t+1 to frame t with an occlusion mask.

    Each pixel of frame t+1 is split into supersamples; a supersample on limb
    k is carried rigidly with that limb back to frame t. A pixel is valid when
    every supersample lands inside the image on the limb it started on (or
    stays on background), the pixel is either covered by a single limb or all
    its supersamples share one displacement, and at most FOOTPRINT_TOLERANCE
    of its bilinear sampling weight in frame t falls on pixels that are not
    purely its own limb (or background). Whole pixels moved by one integer
    displacement are always valid.
    """
    h, w = person.height, person.width
    s = SUPERSAMPLE
    j0 = sk.forward_kinematics(state_t, person.lengths, person.torso_anchor)
    j1 = sk.forward_kinematics(state_t1, person.lengths, person.torso_anchor)
    a0, a1 = sk.limb_angles(state_t), sk.limb_angles(state_t1)
    px, py = _subsample_grid(h, w)
    lab1 = sk.label_points(px, py, j1, person.radii)
    src_x, src_y = px.copy(), py.copy()
    for k, (_, a, _, _) in enumerate(sk.LIMBS):
        sel = lab1 == k
        if not sel.any():
            continue
        # limb k maps p -> o0 + R(a0 - a1)(p - o1); written as a displacement so equal
        # poses give exactly zero flow
        d = a0[k] - a1[k]
        c, s_ = np.cos(d), np.sin(d)
        rx, ry = px[sel] - j1[a, 0], py[sel] - j1[a, 1]
        src_x[sel] = px[sel] + (j0[a, 0] - j1[a, 0]) + (c - 1) * rx - s_ * ry
        src_y[sel] = py[sel] + (j0[a, 1] - j1[a, 1]) + s_ * rx + (c - 1) * ry
    inside = (src_x >= -0.5) & (src_x <= w - 0.5) & (src_y >= -0.5) & (src_y <= h - 0.5)
    lab0 = sk.label_points(src_x, src_y, j0, person.radii)
    ok = inside & (lab0 == lab1)
    dx, dy = src_x - px, src_y - py

    def blocks(a):
        return a.reshape(h, s, w, s).transpose(0, 2, 1, 3).reshape(h, w, s * s)

    okb, dxb, dyb, labb = blocks(ok), blocks(dx), blocks(dy), blocks(lab1)
    same = (np.ptp(dxb, -1) < 1e-9) & (np.ptp(dyb, -1) < 1e-9)
    pure = np.ptp(labb, -1) == 0
    # a rigid motion is affine, so the supersample mean is the pixel-centre displacement
    flow = np.stack([dxb.mean(-1), dyb.mean(-1)], -1)
    footprint = _footprint_mismatch(blocks(sk.label_points(px, py, j0, person.radii)),
                                    np.where(pure, labb[..., 0], -3), flow)
    # a shared integer displacement carries the whole pixel onto one source pixel exactly
    exact = same & np.all(np.abs(flow - np.round(flow)) < 1e-9, -1)
    mask = okb.all(-1) & (pure | same) & ((footprint <= FOOTPRINT_TOLERANCE) | exact)
    return FlowField(flow, mask.astype(np.float32))


def _footprint_mismatch(labels0: np.ndarray, target: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bilinear weight of each pixel's source footprint that is not purely its own label.

    ``labels0`` holds the (H, W, s*s) supersample labels of frame t and
    ``target`` the label of each frame t+1 pixel (-3 where it is mixed).
    """
    h, w = target.shape
    lab0 = np.where(np.ptp(labels0, -1) == 0, labels0[..., 0], -2)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xs + flow[..., 0], 0, w - 1)
    sy = np.clip(ys + flow[..., 1], 0, h - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ax, ay = sx - x0, sy - y0
    bad = np.zeros((h, w))
    for yy, xx, wt in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)),
                       (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay)):
        bad += wt * (lab0[yy, xx] != target)
    return bad


@dataclass
class ClipRecord:
    person_id: str
    clip_id: str
    frames: list
    poses: list
    flows: list
    kept_indices: list

    def __post_init__(self):
        if self.flows is not None and len(self.flows) != len(self.frames) - 1:
            raise ValueError("a clip of n frames carries n-1 flows")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class FilterConfig:
    static_run: int = STATIC_RUN  # m: frames of no motion before a run counts as frozen
    motion_threshold: float = MOTION_THRESHOLD  # px, mean joint displacement
    margin: float = 0.0  # px kept between visible keypoints and the border
    min_length: int = 2


def _frame_in_frame(pose: PoseMap, margin: float) -> bool:
    kp = pose.keypoints
    if not kp[:, 2].all():
        return False
    x, y = kp[:, 0], kp[:, 1]
    return bool(np.all(x >= margin) and np.all(x <= pose.width - 1 - margin)
                and np.all(y >= margin) and np.all(y <= pose.height - 1 - margin))


def filter_invalid_frames(clip: ClipRecord, rules: FilterConfig = FilterConfig()) -> List[ClipRecord]:
    """Drop partial-body and frozen frames, splitting the clip at removals.

    Returns the surviving contiguous sub-clips; a clip that needs no split
    keeps its id.
    """
    n = len(clip)
    if n == 0:
        raise EmptyClipError(f"clip {clip.clip_id} is empty")
    keep = np.array([_frame_in_frame(p, rules.margin) for p in clip.poses])
    if n > 1:
        kp = np.stack([p.keypoints for p in clip.poses])
        static = np.concatenate([[False], mean_joint_displacement(kp) < rules.motion_threshold])
        t = 0
        while t < n:
            if static[t]:
                e = t
                while e < n and static[e]:
                    e += 1
                if e - t >= rules.static_run:
                    keep[t:e] = False
                t = e
            else:
                t += 1
    runs, t = [], 0
    while t < n:
        if keep[t]:
            e = t
            while e < n and keep[e]:
                e += 1
            if e - t >= rules.min_length:
                runs.append((t, e))
            t = e
        else:
            t += 1
    if not runs:
        raise EmptyClipError(f"no valid frames survive in clip {clip.clip_id}")
    if runs == [(0, n)]:
        return [clip]
    out = []
    for i, (a, b) in enumerate(runs):
        out.append(ClipRecord(
            person_id=clip.person_id,
            clip_id=f"{clip.clip_id}.{i}",
            frames=clip.frames[a:b],
            poses=clip.poses[a:b],
            flows=None if clip.flows is None else clip.flows[a:b - 1],
            kept_indices=list(clip.kept_indices[a:b]),
        ))
    return out


def render_clip(person: PersonSpec, motion: MotionSpec, person_id: str, clip_id: str) -> ClipRecord:
    states = motion.trajectory()
    frames, poses = [], []
    for st in states:
        f, p = render_frame(person, st, strict=False)
        frames.append(f)
        poses.append(p)
    flows = [render_flow(person, states[t], states[t + 1]) for t in range(len(states) - 1)]
    return ClipRecord(person_id, clip_id, frames, poses, flows, list(range(len(states))))


@dataclass
class DatasetConfig:
    n_train: int = 20
    n_test: int = 5
    clips_per_identity: int = 4
    clip_length: int = 80
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH
    amplitude_scale: float = 1.0
    seed: int = 0
    filter: FilterConfig = field(default_factory=FilterConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "filter" in d:
            d["filter"] = FilterConfig(**d["filter"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def generate_clips(config: DatasetConfig):
    """Yield (split, ClipRecord) for every filtered clip, deterministically."""
    total = config.n_train + config.n_test
    for pi in range(total):
        split = "train" if pi < config.n_train else "test"
        person_id = f"p{pi:03d}"
        person = make_identity(_seed_int(config.seed, 1, pi), config.height, config.width)
        for ci in range(config.clips_per_identity):
            motion = make_motion(_seed_int(config.seed, 2, pi, ci), config.clip_length,
                                 config.amplitude_scale, config.height, config.width)
            clip = render_clip(person, motion, person_id, f"{person_id}_c{ci:02d}")
            try:
                subclips = filter_invalid_frames(clip, config.filter)
            except EmptyClipError:
                log.warning("clip %s removed entirely by filtering", clip.clip_id)
                continue
            for sc in subclips:
                yield split, sc


def build_dataset(config: DatasetConfig, out_dir) -> "mio.DatasetManifest":
    """Render, filter and write the full corpus; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = []
    for split, clip in generate_clips(config):
        clips.append(mio.write_clip(out, split, clip))
    manifest = mio.DatasetManifest(
        root=out, config=config.to_dict(), clips=clips,
        height=config.height, width=config.width,
        pose_channels=sk.NUM_LIMBS + 1, has_flow=True)
    manifest.save(out / "manifest.json")
    return manifest


def in_memory_dataset(config: DatasetConfig) -> "mio.DatasetManifest":
    """Same corpus as build_dataset without touching the filesystem."""
    entries = []
    for split, clip in generate_clips(config):
        entries.append(mio.clip_entry_from_record(split, clip))
    return mio.DatasetManifest(root=None, config=config.to_dict(), clips=entries,
                               height=config.height, width=config.width,
                               pose_channels=sk.NUM_LIMBS + 1, has_flow=True)
