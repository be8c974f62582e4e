"""On-disk formats: dataset manifest, PNG frames, raw flow files, tensor archives.

Flow file: little-endian int32 height, int32 width, then height*width*3
float32 values in row-major (y, x, [dx, dy, valid]) order.

Tensor archive (``tdgn/1``): the 8-byte magic ``TDGNARC1``, a little-endian
uint64 header length, a UTF-8 JSON header, then every tensor listed in the
header as contiguous little-endian float32 values in header order.
"""
from __future__ import annotations

import io as _io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .core_types import FlowField, Frame, PoseMap
from .errors import CheckpointError, ShapeError

ARCHIVE_MAGIC = b"TDGNARC1"
ARCHIVE_VERSION = "tdgn/1"


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, array: np.ndarray) -> None:
    """Write an HxW or HxWx3 float image in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(array)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_pose_png(path, channels: np.ndarray) -> None:
    """Pose channels tiled side by side into one grayscale strip (H, W*C)."""
    c = channels.shape[2]
    write_png(path, np.concatenate([channels[..., i] for i in range(c)], axis=1))


def read_pose_png(path, width: int) -> np.ndarray:
    strip = read_png(path)
    c = strip.shape[1] // width
    return np.stack([strip[:, i * width:(i + 1) * width] for i in range(c)], -1)


def write_flow(path, flow: FlowField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = flow.flow.shape[:2]
    payload = np.concatenate([flow.flow, flow.occlusion_mask[..., None]], -1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", h, w))
        fh.write(payload.tobytes())


def read_flow_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * 3:
        raise ShapeError(f"{path}: payload holds {data.size} values, expected {h * w * 3}")
    return data.reshape(h, w, 3).astype(np.float32)


def read_flow(path) -> FlowField:
    a = read_flow_array(path)
    return FlowField(a[..., :2], a[..., 2])


@dataclass
class ClipData:
    """Dense arrays of one clip; frames and poses quantized to 8 bits."""

    frames: np.ndarray  # (T, H, W, 3) uint8
    poses: np.ndarray  # (T, H, W, C) uint8
    keypoints: np.ndarray  # (T, J, 3)
    flows: Optional[np.ndarray] = None  # (T-1, H, W, 2) float32
    masks: Optional[np.ndarray] = None  # (T-1, H, W) float32

    def __len__(self):
        return self.frames.shape[0]

    def frame(self, t: int) -> Frame:
        return Frame(self.frames[t].astype(np.float32) / 255.0)

    def pose(self, t: int) -> PoseMap:
        return PoseMap(self.poses[t].astype(np.float32) / 255.0, self.keypoints[t])

    def flow(self, t: int) -> Optional[FlowField]:
        if self.flows is None:
            return None
        return FlowField(self.flows[t], self.masks[t])


def clip_data_from_record(clip) -> ClipData:
    frames = np.stack([_to_u8(f.pixels) for f in clip.frames])
    poses = np.stack([_to_u8(p.channels) for p in clip.poses])
    kps = np.stack([p.keypoints for p in clip.poses])
    if clip.flows is not None and len(clip.flows):
        flows = np.stack([f.flow for f in clip.flows]).astype(np.float32)
        masks = np.stack([f.occlusion_mask for f in clip.flows]).astype(np.float32)
    elif clip.flows is not None:
        h, w = frames.shape[1:3]
        flows, masks = np.zeros((0, h, w, 2), np.float32), np.zeros((0, h, w), np.float32)
    else:
        flows = masks = None
    return ClipData(frames, poses, kps, flows, masks)


def clip_entry_from_record(split: str, clip) -> dict:
    entry = {
        "person_id": clip.person_id,
        "clip_id": clip.clip_id,
        "split": split,
        "length": len(clip),
        "kept_indices": [int(i) for i in clip.kept_indices],
    }
    entry["_data"] = clip_data_from_record(clip)
    return entry


def write_clip(root: Path, split: str, clip) -> dict:
    """Write frame/pose PNGs and flow files; return the manifest entry."""
    cid = clip.clip_id
    data = clip_data_from_record(clip)
    frames, poses, flows = [], [], []
    for t in range(len(clip)):
        fp = f"frames/{cid}/{t:04d}.png"
        pp = f"poses/{cid}/{t:04d}.png"
        Image.fromarray(data.frames[t]).save(_mk(root / fp), format="PNG")
        c = data.poses.shape[-1]
        Image.fromarray(np.concatenate([data.poses[t, ..., i] for i in range(c)], 1)).save(
            _mk(root / pp), format="PNG")
        frames.append(fp)
        poses.append(pp)
    if clip.flows is not None:
        for t, fl in enumerate(clip.flows):
            rel = f"flows/{cid}/{t:04d}.flo"
            write_flow(root / rel, fl)
            flows.append(rel)
    entry = {
        "person_id": clip.person_id,
        "clip_id": cid,
        "split": split,
        "length": len(clip),
        "kept_indices": [int(i) for i in clip.kept_indices],
        "frames": frames,
        "poses": poses,
        "flows": flows if clip.flows is not None else None,
        "keypoints": data.keypoints.tolist(),
    }
    # reuse the exact arrays just written
    entry["_data"] = data
    return entry


def _mk(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class DatasetManifest:
    root: Optional[Path]
    config: dict
    clips: List[dict]
    height: int
    width: int
    pose_channels: int
    has_flow: bool = True
    _cache: Dict[str, ClipData] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for c in self.clips:
            if "_data" in c:
                self._cache[c["clip_id"]] = c["_data"]

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(self.root, self.config, [c for c in self.clips if c["split"] == name],
                               self.height, self.width, self.pose_channels, self.has_flow,
                               self._cache)

    @property
    def person_ids(self) -> List[str]:
        return sorted({c["person_id"] for c in self.clips})

    def clip(self, clip_id: str) -> dict:
        for c in self.clips:
            if c["clip_id"] == clip_id:
                return c
        raise KeyError(clip_id)

    def clip_data(self, clip_id: str) -> ClipData:
        if clip_id not in self._cache:
            self._cache[clip_id] = self._load_clip(self.clip(clip_id))
        return self._cache[clip_id]

    def _load_clip(self, entry: dict) -> ClipData:
        if self.root is None:
            raise FileNotFoundError(f"clip {entry['clip_id']} has no backing files")
        root = Path(self.root)
        frames = np.stack([read_png(root / p) for p in entry["frames"]])
        poses = np.stack([read_pose_png(root / p, self.width) for p in entry["poses"]])
        kps = np.asarray(entry["keypoints"], dtype=np.float64)
        flows = masks = None
        if entry.get("flows") is not None:
            h, w = frames.shape[1:3]
            arrs = [read_flow_array(root / p) for p in entry["flows"]]
            fl = np.stack(arrs) if arrs else np.zeros((0, h, w, 3), np.float32)
            flows, masks = fl[..., :2].copy(), fl[..., 2].copy()
        return ClipData(frames, poses, kps, flows, masks)

    def to_json(self) -> dict:
        return {
            "format": "movesynth-manifest/1",
            "height": self.height,
            "width": self.width,
            "pose_channels": self.pose_channels,
            "has_flow": self.has_flow,
            "config": self.config,
            "clips": [{k: v for k, v in c.items() if not k.startswith("_")} for c in self.clips],
        }

    def save(self, path) -> None:
        atomic_write_bytes(path, json.dumps(self.to_json(), sort_keys=True, indent=1).encode())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path) as fh:
            d = json.load(fh)
        return cls(root=path.parent, config=d.get("config", {}), clips=d["clips"],
                   height=d["height"], width=d["width"], pose_channels=d["pose_channels"],
                   has_flow=d.get("has_flow", True))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, kind: str, tensors: Dict[str, np.ndarray], config: Optional[dict] = None,
                 extra: Optional[dict] = None) -> None:
    """Write named float32 tensors plus a JSON header; atomic."""
    names = list(tensors)
    header = {
        "version": ARCHIVE_VERSION,
        "kind": kind,
        "config": config or {},
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = _io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    for n in names:
        buf.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_archive(path, kind: Optional[str] = None):
    """Return (header, {name: float32 array})."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != ARCHIVE_MAGIC:
        raise CheckpointError(f"{path}: not a tensor archive")
    (hl,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hl].decode())
    if header.get("version") != ARCHIVE_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected kind {kind}, found {header.get('kind')}")
    off = 16 + hl
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"])
        tensors[t["name"]] = a.astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing payload bytes")
    return header, tensors
