"""Procedural motion+caption corpus for desk-scale experiments.

Each sample is a smooth parametric trajectory drawn from a small motif
vocabulary (walking, turning, arm raises, sitting down / standing up),
written into the pose feature layout with self-consistent velocity channels
and binary foot contacts, plus a caption generated from a closed template
grammar over the motif parameters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .motion import MotionSequence, PoseFeatureLayout, load_feature_file, save_feature_file
from .seeding import substream

MOTIFS = (
    "walk_forward",
    "walk_backward",
    "turn_left",
    "turn_right",
    "raise_left_arm",
    "raise_right_arm",
    "sit_down",
    "stand_up",
)

SPEEDS = (("slowly", 0.6), ("steadily", 1.0), ("quickly", 1.5))
EFFORTS = (("small", 0.6), ("sweeping", 1.2))

_TEMPLATES = {
    "walk_forward": (
        "a person walks forward {adv} with {eff} strides",
        "someone {adv} walks ahead taking {eff} steps",
        "a figure strides forward {adv}, steps {eff}",
    ),
    "walk_backward": (
        "a person walks backward {adv} with {eff} strides",
        "someone {adv} steps backwards, strides {eff}",
        "a figure retreats {adv} taking {eff} steps",
    ),
    "turn_left": (
        "a person turns to the left {adv} in a {eff} arc",
        "someone {adv} rotates leftward with a {eff} sweep",
        "a figure pivots left {adv}, the arc {eff}",
    ),
    "turn_right": (
        "a person turns to the right {adv} in a {eff} arc",
        "someone {adv} rotates rightward with a {eff} sweep",
        "a figure pivots right {adv}, the arc {eff}",
    ),
    "raise_left_arm": (
        "a person raises the left arm {adv} in a {eff} motion",
        "someone {adv} lifts their left arm with a {eff} swing",
        "a figure brings the left arm up {adv}, the swing {eff}",
    ),
    "raise_right_arm": (
        "a person raises the right arm {adv} in a {eff} motion",
        "someone {adv} lifts their right arm with a {eff} swing",
        "a figure brings the right arm up {adv}, the swing {eff}",
    ),
    "sit_down": (
        "a person sits down {adv} with a {eff} bend",
        "someone {adv} lowers themselves to sit, bending {eff}",
        "a figure crouches into a seat {adv}, the drop {eff}",
    ),
    "stand_up": (
        "a person stands up {adv} with a {eff} push",
        "someone {adv} rises to their feet, pushing {eff}",
        "a figure gets up from sitting {adv}, the rise {eff}",
    ),
}


def caption_for(motif_id, speed_idx, effort_idx, phrasing_idx):
    motif = MOTIFS[motif_id]
    adv = SPEEDS[speed_idx][0]
    eff = EFFORTS[effort_idx][0]
    return _TEMPLATES[motif][phrasing_idx % len(_TEMPLATES[motif])].format(adv=adv, eff=eff)


@dataclass
class CorpusSample:
    motion: MotionSequence
    caption: str
    motif_id: int


@dataclass
class SyntheticCorpus:
    samples: list
    seed: int
    splits: dict
    joint_count: int
    fps: float
    length_range: tuple

    def split_samples(self, name):
        return [self.samples[i] for i in self.splits[name]]

    @property
    def feature_dim(self):
        return PoseFeatureLayout(self.joint_count).dim


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _synthesize_features(motif_id, speed, effort, length, joint_count, fps, rng):
    """One motion clip in the pose feature layout; velocities are exact frame diffs."""
    j = joint_count
    layout = PoseFeatureLayout(j)
    t = np.arange(length) / fps
    feats = np.zeros((length, layout.dim), dtype=np.float64)
    motif = MOTIFS[motif_id]

    gait_hz = 1.4 * speed
    phase0 = rng.uniform(0, 2 * np.pi)
    gait = 2 * np.pi * gait_hz * t + phase0
    ramp = _smoothstep(t / t[-1] if t[-1] > 0 else t)

    # root channels
    ang = feats[:, layout.slice("root_angular_vel")]
    xz = feats[:, layout.slice("root_xz_vel")]
    height = feats[:, layout.slice("root_height")]
    ang[:, 0] = 0.02 * np.sin(0.7 * gait)
    height[:, 0] = 0.90 + 0.02 * effort * np.sin(2 * gait)
    if motif == "walk_forward":
        xz[:, 1] = 1.1 * speed + 0.08 * effort * np.sin(2 * gait)
    elif motif == "walk_backward":
        xz[:, 1] = -0.85 * speed - 0.06 * effort * np.sin(2 * gait)
    elif motif in ("turn_left", "turn_right"):
        sign = 1.0 if motif == "turn_left" else -1.0
        ang[:, 0] = sign * (0.9 * speed + 0.1 * effort * np.sin(gait))
        xz[:, 1] = 0.25 * speed
    elif motif == "sit_down":
        height[:, 0] = 0.90 - 0.42 * effort / 1.2 * ramp
    elif motif == "stand_up":
        height[:, 0] = 0.48 + 0.42 * effort / 1.2 * ramp

    # non-root joints: rest pose plus motif-dependent oscillation/ramp
    n_locals = j - 1
    rest = np.zeros((n_locals, 3))
    idx = np.arange(n_locals)
    rest[:, 0] = 0.25 * np.where(idx % 2 == 0, 1.0, -1.0) * (1 + idx // 2 % 3)
    rest[:, 1] = 0.3 + 0.18 * (idx // 2)
    rest[:, 2] = 0.05 * (idx % 3)

    legs = idx[: max(2, n_locals // 2)]
    arms = idx[max(2, n_locals // 2) : n_locals]
    left_arm = arms[0::2] if arms.size else idx[:1]
    right_arm = arms[1::2] if arms.size > 1 else idx[:1]

    amp = np.zeros(n_locals)
    freq = np.full(n_locals, gait_hz)
    phase = rng.uniform(0, 2 * np.pi, size=n_locals) * 0.05
    ramp_mask = np.zeros(n_locals)
    if motif in ("walk_forward", "walk_backward"):
        amp[legs] = 0.28 * effort
        phase[legs] += np.where(legs % 2 == 0, 0.0, np.pi)
        amp[arms] = 0.10 * effort
        phase[arms] += np.where(arms % 2 == 0, np.pi, 0.0)
    elif motif in ("turn_left", "turn_right"):
        amp[legs] = 0.12 * effort
        phase[legs] += np.where(legs % 2 == 0, 0.0, np.pi)
        amp[arms] = 0.16 * effort
    elif motif == "raise_left_arm":
        ramp_mask[left_arm] = 0.55 * effort
        amp[left_arm] = 0.05 * effort
    elif motif == "raise_right_arm":
        ramp_mask[right_arm] = 0.55 * effort
        amp[right_arm] = 0.05 * effort
    elif motif in ("sit_down", "stand_up"):
        sign = -1.0 if motif == "sit_down" else 1.0
        ramp_mask[legs] = 0.30 * sign * effort
        amp[legs] = 0.04 * effort

    osc = amp[None, :] * np.sin(2 * np.pi * freq[None, :] * t[:, None] + phase0 + phase[None, :])
    lift = ramp_mask[None, :] * ramp[:, None]
    pos = np.zeros((length, n_locals, 3))
    pos[:, :, 0] = rest[None, :, 0] + 0.4 * osc
    pos[:, :, 1] = rest[None, :, 1] + lift + 0.2 * osc
    pos[:, :, 2] = rest[None, :, 2] + osc
    pos += rng.normal(0.0, 0.015, size=pos.shape)
    feats[:, layout.slice("local_positions")] = pos.reshape(length, -1)

    # velocities: root (xz displacement per frame, height diff) then position diffs
    vel = np.zeros((length, j, 3))
    vel[:, 0, 0] = xz[:, 0] / fps
    vel[:, 0, 2] = xz[:, 1] / fps
    dh = np.diff(height[:, 0])
    vel[:-1, 0, 1] = dh
    vel[-1, 0, 1] = dh[-1] if length > 1 else 0.0
    dp = np.diff(pos, axis=0)
    vel[:-1, 1:, :] = dp
    vel[-1, 1:, :] = dp[-1] if length > 1 else 0.0
    feats[:, layout.slice("local_velocities")] = vel.reshape(length, -1)

    rot_base = np.tile(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), (n_locals, 1))
    rot_osc = 0.12 * (amp + np.abs(ramp_mask))[None, :, None] * np.sin(
        2 * np.pi * freq[None, :, None] * t[:, None, None] + phase[None, :, None]
    )
    rot = rot_base[None, :, :] + rot_osc * np.array([0.0, 1.0, 0.5, -0.5, 0.0, 1.0])
    rot += rng.normal(0.0, 0.01, size=rot.shape)
    feats[:, layout.slice("local_rotations")] = rot.reshape(length, -1)

    contacts = np.zeros((length, 4))
    if motif in ("walk_forward", "walk_backward", "turn_left", "turn_right"):
        left_down = np.sin(gait) >= 0
        contacts[:, 0] = left_down
        contacts[:, 1] = left_down
        contacts[:, 2] = ~left_down
        contacts[:, 3] = ~left_down
    else:
        contacts[:] = 1.0
    feats[:, layout.slice("foot_contacts")] = contacts

    return MotionSequence(feats.astype(np.float32), fps=fps, layout=layout)


def _stratified_split(motif_ids, n_samples, rng):
    """80/5/15 split with exact floor-rounded global sizes, stratified by motif."""
    targets = {
        "train": int(np.floor(0.80 * n_samples)),
        "val": int(np.floor(0.05 * n_samples)),
    }
    targets["test"] = n_samples - targets["train"] - targets["val"]
    if targets["val"] == 0:
        warnings.warn(f"corpus of {n_samples} samples leaves the validation split empty")

    groups = {}
    for i, m in enumerate(motif_ids):
        groups.setdefault(m, []).append(i)
    for g in groups.values():
        rng.shuffle(g)

    splits = {"train": [], "val": [], "test": []}
    # largest-remainder allocation per (group, split) against the global targets
    quotas = {}
    for name, tgt in targets.items():
        ratio = tgt / n_samples if n_samples else 0.0
        floors, fracs = {}, []
        for m, g in groups.items():
            exact = ratio * len(g)
            floors[m] = int(np.floor(exact))
            fracs.append((exact - floors[m], m))
        short = tgt - sum(floors.values())
        for _, m in sorted(fracs, key=lambda x: (-x[0], x[1]))[:short]:
            floors[m] += 1
        quotas[name] = floors

    for m, g in sorted(groups.items()):
        cursor = 0
        for name in ("train", "val", "test"):
            take = quotas[name][m]
            splits[name].extend(g[cursor : cursor + take])
            cursor += take
        # leftovers from rounding go to train
        splits["train"].extend(g[cursor:])
    for name in splits:
        splits[name].sort()
    return splits


def generate_synthetic(seed, n_samples, joint_count=8, length_range=(40, 96), fps=20.0):
    """Deterministic corpus of motif motions with templated captions and an 80/5/15 split."""
    lo, hi = length_range
    if lo < 2 or hi < lo:
        raise ValueError(f"degenerate length_range {length_range}")
    rng = substream(seed, "data")
    samples = []
    motif_ids = []
    for _ in range(n_samples):
        motif_id = int(rng.integers(0, len(MOTIFS)))
        speed_idx = int(rng.integers(0, len(SPEEDS)))
        effort_idx = int(rng.integers(0, len(EFFORTS)))
        phrasing_idx = int(rng.integers(0, 3))
        length = int(rng.integers(lo, hi + 1))
        motion = _synthesize_features(
            motif_id, SPEEDS[speed_idx][1], EFFORTS[effort_idx][1], length, joint_count, fps, rng
        )
        caption = caption_for(motif_id, speed_idx, effort_idx, phrasing_idx)
        samples.append(CorpusSample(motion, caption, motif_id))
        motif_ids.append(motif_id)
    splits = _stratified_split(motif_ids, n_samples, rng)
    return SyntheticCorpus(
        samples=samples,
        seed=seed,
        splits=splits,
        joint_count=joint_count,
        fps=fps,
        length_range=(lo, hi),
    )


# -- persistence ---------------------------------------------------------------


def save_corpus(corpus, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "motions").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(corpus.samples):
        fname = f"motions/{i:05d}.motf"
        save_feature_file(out_dir / fname, s.motion)
        entries.append({"file": fname, "caption": s.caption, "motif_id": s.motif_id})
    manifest = {
        "seed": corpus.seed,
        "n_samples": len(corpus.samples),
        "joint_count": corpus.joint_count,
        "fps": corpus.fps,
        "length_range": list(corpus.length_range),
        "splits": {k: list(v) for k, v in corpus.splits.items()},
        "samples": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def load_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    samples = [
        CorpusSample(load_feature_file(corpus_dir / e["file"]), e["caption"], e["motif_id"])
        for e in manifest["samples"]
    ]
    return SyntheticCorpus(
        samples=samples,
        seed=manifest["seed"],
        splits={k: list(v) for k, v in manifest["splits"].items()},
        joint_count=manifest["joint_count"],
        fps=manifest["fps"],
        length_range=tuple(manifest["length_range"]),
    )
