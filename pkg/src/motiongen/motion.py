"""Pose feature layout, motion sequences, velocity, normalization and file I/O.

A pose frame is a flat feature vector laid out as: root angular velocity (1),
root XZ plane velocity (2), root height (1), local joint positions for the
non-root joints (3*(j-1)), local joint velocities including the root (3*j),
local joint rotations in a 6D representation for the non-root joints
(6*(j-1)) and 4 binary foot contact channels. Total width 12*j - 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MOTF_MAGIC = b"MOTF1"


def feature_dim(joint_count):
    """Feature width for a skeleton with `joint_count` joints: 12*j - 1."""
    if joint_count < 2:
        raise ValueError(f"joint_count must be >= 2, got {joint_count}")
    return 12 * joint_count - 1


@dataclass(frozen=True)
class PoseFeatureLayout:
    """Ordered, contiguous feature segments for a j-joint skeleton."""

    joint_count: int

    def __post_init__(self):
        if self.joint_count < 2:
            raise ValueError(f"joint_count must be >= 2, got {self.joint_count}")

    @property
    def segments(self):
        j = self.joint_count
        return (
            ("root_angular_vel", 1),
            ("root_xz_vel", 2),
            ("root_height", 1),
            ("local_positions", 3 * (j - 1)),
            ("local_velocities", 3 * j),
            ("local_rotations", 6 * (j - 1)),
            ("foot_contacts", 4),
        )

    @property
    def dim(self):
        return feature_dim(self.joint_count)

    def slice(self, name):
        offset = 0
        for seg_name, width in self.segments:
            if seg_name == name:
                return slice(offset, offset + width)
            offset += width
        raise KeyError(f"no segment named {name!r}")


@dataclass
class MotionSequence:
    """frames x dim float array with frame-rate and skeleton metadata."""

    features: np.ndarray
    fps: float
    layout: PoseFeatureLayout

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2D (frames x dim), got {self.features.ndim}D")
        if self.features.shape[1] != self.layout.dim:
            raise ValueError(
                f"feature dim {self.features.shape[1]} != layout dim {self.layout.dim} "
                f"(12*{self.layout.joint_count} - 1)"
            )
        if not np.isfinite(self.features).all():
            raise ValueError("motion features contain non-finite values")

    @property
    def length(self):
        return self.features.shape[0]


def velocity(features):
    """Frame-difference operator: row i is x[i+1] - x[i]; output has T-1 rows."""
    arr = np.asarray(features)
    if arr.shape[0] < 2:
        raise ValueError(f"velocity needs at least 2 frames, got {arr.shape[0]}")
    return arr[1:] - arr[:-1]


def crop_or_tile(features, length, rng):
    """Random contiguous crop of `length` frames; shorter inputs are looped.

    Tiling (rather than zero padding) keeps the velocity channels continuous
    across the seam up to the wrap jump.
    """
    t = features.shape[0]
    if t >= length:
        off = int(rng.integers(0, t - length + 1))
        return features[off : off + length]
    reps = -(-(length + t) // t)
    tiled = np.concatenate([features] * reps, axis=0)
    off = int(rng.integers(0, t))
    return tiled[off : off + length]


# -- normalization -------------------------------------------------------------


@dataclass
class FeatureStats:
    """Per-dimension mean/std; zero-variance dims pass through unscaled."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feature_arrays, eps=1e-8):
        stacked = np.concatenate([np.asarray(f) for f in feature_arrays], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        keep = std > eps
        mean = np.where(keep, mean, 0.0)
        std = np.where(keep, std, 1.0)
        return cls(mean.astype(np.float64), std.astype(np.float64))

    def normalize(self, features):
        return ((np.asarray(features) - self.mean) / self.std).astype(np.asarray(features).dtype)

    def denormalize(self, features):
        return (np.asarray(features) * self.std + self.mean).astype(np.asarray(features).dtype)


# -- .motf feature files --------------------------------------------------------


def save_feature_file(path, motion):
    """Write magic + JSON header (T, D, fps, joints) + float32 LE frame blob."""
    arr = np.ascontiguousarray(motion.features, dtype="<f4")
    header = {
        "T": int(arr.shape[0]),
        "D": int(arr.shape[1]),
        "fps": float(motion.fps),
        "joints": int(motion.layout.joint_count),
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MOTF_MAGIC)
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        f.write(arr.tobytes())
    return path


def load_feature_file(path):
    raw = Path(path).read_bytes()
    if raw[:5] != MOTF_MAGIC:
        raise ValueError(f"{path}: not a motion feature file (bad magic)")
    (head_len,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + head_len].decode("utf-8"))
    t, d, fps, joints = header["T"], header["D"], header["fps"], header["joints"]
    expected = feature_dim(joints)
    if d != expected:
        raise ValueError(
            f"{path}: declared dim {d} inconsistent with {joints} joints (expected 12*{joints} - 1 = {expected})"
        )
    body = raw[9 + head_len :]
    arr = np.frombuffer(body, dtype="<f4", count=t * d).reshape(t, d).copy()
    return MotionSequence(arr, fps=fps, layout=PoseFeatureLayout(joints))
