"""2-D articulated skeleton: joint layout, forward kinematics and capsule geometry."""
from __future__ import annotations

import numpy as np

JOINTS = (
    "pelvis", "neck", "head_top",
    "l_elbow", "l_hand", "r_elbow", "r_hand",
    "l_knee", "l_foot", "r_knee", "r_foot",
)
NUM_JOINTS = len(JOINTS)

# (name, start joint, end joint, parent limb or -1)
LIMBS = (
    ("torso", 0, 1, -1),
    ("head", 1, 2, 0),
    ("l_upper_arm", 1, 3, 0),
    ("l_forearm", 3, 4, 2),
    ("r_upper_arm", 1, 5, 0),
    ("r_forearm", 5, 6, 4),
    ("l_thigh", 0, 7, 0),
    ("l_shin", 7, 8, 6),
    ("r_thigh", 0, 9, 0),
    ("r_shin", 9, 10, 8),
)
NUM_LIMBS = len(LIMBS)
# rest angles: torso absolute, others relative to the parent limb (image coords, y down)
REST_ANGLES = np.array([
    -np.pi / 2,            # torso points up
    0.0,                   # head continues the torso
    np.pi + 0.35,          # left arm hangs down-left
    0.0,
    np.pi - 0.35,          # right arm hangs down-right
    0.0,
    np.pi + 0.15,          # left thigh
    0.0,
    np.pi - 0.15,          # right thigh
    0.0,
])
# limb lengths in pixels at the 32x64 reference resolution
REFERENCE_LENGTHS = np.array([15.0, 5.0, 7.5, 6.5, 7.5, 6.5, 10.5, 10.0, 10.5, 10.0])
# back-to-front paint order
Z_ORDER = (3, 2, 7, 6, 0, 1, 8, 9, 4, 5)
POSE_STATE_SIZE = NUM_LIMBS + 2  # limb angle offsets + root (dx, dy)


def reference_scale(height: int, width: int) -> float:
    return min(height / 64.0, width / 32.0)


def forward_kinematics(pose_state, lengths, anchor) -> np.ndarray:
    """Joint positions (J, 2) in pixel coordinates.

    ``pose_state`` holds per-limb angle offsets from the rest pose followed by
    the root displacement (dx, dy).
    """
    pose_state = np.asarray(pose_state, dtype=np.float64)
    offsets = pose_state[:NUM_LIMBS]
    root = np.asarray(anchor, dtype=np.float64) + pose_state[NUM_LIMBS:NUM_LIMBS + 2]
    joints = np.zeros((NUM_JOINTS, 2))
    joints[0] = root
    absolute = np.zeros(NUM_LIMBS)
    for k, (_, a, b, parent) in enumerate(LIMBS):
        base = absolute[parent] if parent >= 0 else 0.0
        absolute[k] = base + REST_ANGLES[k] + offsets[k]
        joints[b] = joints[a] + lengths[k] * np.array([np.cos(absolute[k]), np.sin(absolute[k])])
    return joints


def limb_angles(pose_state) -> np.ndarray:
    """Absolute orientation of every limb."""
    offsets = np.asarray(pose_state, dtype=np.float64)[:NUM_LIMBS]
    absolute = np.zeros(NUM_LIMBS)
    for k, (_, _, _, parent) in enumerate(LIMBS):
        base = absolute[parent] if parent >= 0 else 0.0
        absolute[k] = base + REST_ANGLES[k] + offsets[k]
    return absolute


def segment_distance(px, py, ax, ay, bx, by) -> np.ndarray:
    """Distance from points (px, py) to segment a-b; broadcasts over points."""
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    cx, cy = ax + t * dx, ay + t * dy
    return np.hypot(px - cx, py - cy)


def label_points(px, py, joints, radii) -> np.ndarray:
    """Front-most limb index covering each point, -1 for background."""
    labels = np.full(np.shape(px), -1, dtype=np.int64)
    for k in Z_ORDER:
        _, a, b, _ = LIMBS[k]
        d = segment_distance(px, py, joints[a, 0], joints[a, 1], joints[b, 0], joints[b, 1])
        labels = np.where(d <= radii[k], k, labels)
    return labels
