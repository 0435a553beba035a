"""Dataset pipeline: BVH ingest/export, downsampling, windowing, normalization,
a deterministic synthetic gait generator, and the binary dataset cache.

BVH files are the ingest format. End Sites are dropped from the skeleton (the
exporter writes zero-length End Sites back for every leaf), and the root
OFFSET is folded into the translation channels so the stored root offset is
always zero.
"""

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .motion import (
    CONTACT_CHANNELS,
    MotionClip,
    Skeleton,
    accumulate_root_xz,
    compute_contact_labels,
    forward_kinematics,
    pack_frames,
    world_joint_positions,
)
from .rotations import matrix_to_sixd, sixd_to_matrix

CACHE_MAGIC = "MBUFDS"
CACHE_VERSION = 1

EXPORT_EULER_ORDER = "ZXY"


class BvhParseError(ValueError):
    """Malformed BVH input; carries the 1-based offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    source_fps: int
    target_fps: int
    window_len: int
    stride: int
    scale: float = 1.0

    def __post_init__(self):
        if self.target_fps < 1 or self.source_fps < 1:
            raise DatasetConfigError("frame rates must be positive")
        if self.source_fps % self.target_fps != 0:
            raise DatasetConfigError(
                f"source fps {self.source_fps} not divisible by target fps {self.target_fps}"
            )
        if self.window_len < 2:
            raise DatasetConfigError("window_len must be >= 2")
        if self.stride < 1:
            raise DatasetConfigError("stride must be >= 1")


@dataclass
class TrainingWindow:
    clip: MotionClip
    source_id: str
    start: int

    def __post_init__(self):
        if len(self.clip) < 1:
            raise ValueError("empty training window")


@dataclass(frozen=True)
class RawBvhMotion:
    """Motion data exactly as stored in a BVH file (after unit scaling)."""

    root_positions: np.ndarray  # (K, 3), meters
    euler_degrees: np.ndarray  # (K, J, 3) in each joint's channel order
    rotation_orders: tuple  # per-joint order strings, e.g. "ZXY"
    frame_time: float


# ---------------------------------------------------------------------------
# BVH parsing


class _Cursor:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    @property
    def line_no(self):
        return self.pos  # already advanced past the returned line

    def next(self, context):
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise BvhParseError(f"unexpected end of file while reading {context}", self.pos)


def parse_bvh(text, scale=1.0, foot_joint_names=None):
    """Parse BVH text into a :class:`Skeleton` and raw channel data.

    Parameters
    ----------
    text : str or bytes
    scale : float
        Multiplier converting file units to meters (applied to offsets and
        root translations).
    foot_joint_names : sequence of 4 joint names, optional
        Contact joints in (left heel, left toe, right heel, right toe) order.
        When omitted, feet are guessed from joint names, falling back to the
        lowest-resting leaf joints.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    cur = _Cursor(text)

    line = cur.next("header")
    if line != "HIERARCHY":
        raise BvhParseError(f"expected HIERARCHY, got {line!r}", cur.line_no)

    names, parents, offsets, channels = [], [], [], []
    stack = []

    line = cur.next("hierarchy")
    while True:
        token = line.split()[0]
        if token in ("ROOT", "JOINT"):
            name = "_".join(line.split()[1:])
            if token == "ROOT" and names:
                raise BvhParseError("multiple ROOT declarations", cur.line_no)
            if token == "JOINT" and not stack:
                raise BvhParseError("JOINT outside of a hierarchy block", cur.line_no)
            idx = len(names)
            names.append(name)
            parents.append(stack[-1] if stack else -1)
            _expect_brace(cur)
            offsets.append(_read_offset(cur))
            channels.append(_read_channels(cur, is_root=(token == "ROOT")))
            stack.append(idx)
        elif line.startswith("End Site"):
            _expect_brace(cur)
            _read_offset(cur)  # end-site geometry is dropped
            closing = cur.next("End Site block")
            if closing != "}":
                raise BvhParseError(f"expected '}}' closing End Site, got {closing!r}", cur.line_no)
        elif token == "}":
            if not stack:
                raise BvhParseError("unbalanced '}' in hierarchy", cur.line_no)
            stack.pop()
        elif token == "MOTION":
            break
        else:
            raise BvhParseError(f"unexpected token {token!r} in hierarchy", cur.line_no)
        line = cur.next("hierarchy")

    if stack:
        raise BvhParseError("hierarchy block not closed before MOTION", cur.line_no)
    if not names:
        raise BvhParseError("no joints declared", cur.line_no)

    line = cur.next("frame count")
    if not line.startswith("Frames:"):
        raise BvhParseError(f"expected 'Frames:', got {line!r}", cur.line_no)
    try:
        n_frames = int(line.split()[1])
    except (IndexError, ValueError):
        raise BvhParseError("cannot parse frame count", cur.line_no) from None
    line = cur.next("frame time")
    if not line.startswith("Frame Time:"):
        raise BvhParseError(f"expected 'Frame Time:', got {line!r}", cur.line_no)
    try:
        frame_time = float(line.split()[2])
    except (IndexError, ValueError):
        raise BvhParseError("cannot parse frame time", cur.line_no) from None

    n_channels = sum(len(c) for c in channels)
    root_positions = np.zeros((n_frames, 3))
    euler = np.zeros((n_frames, len(names), 3))
    orders = [_rotation_order(c) for c in channels]

    for f in range(n_frames):
        line = cur.next(f"frame {f + 1} data")
        values = line.split()
        if len(values) != n_channels:
            raise BvhParseError(
                f"frame {f + 1} has {len(values)} values, expected {n_channels}",
                cur.line_no,
            )
        try:
            row = np.array([float(v) for v in values])
        except ValueError:
            raise BvhParseError(f"non-numeric value in frame {f + 1}", cur.line_no) from None
        i = 0
        for j, chans in enumerate(channels):
            rot_axis = 0
            for ch in chans:
                if ch.endswith("position"):
                    root_positions[f, "XYZ".index(ch[0])] = row[i]
                else:
                    euler[f, j, rot_axis] = row[i]
                    rot_axis += 1
                i += 1

    offsets = np.asarray(offsets) * scale
    root_positions = root_positions * scale
    # Fold the root offset into the translation channels.
    root_positions += offsets[0]
    offsets[0] = 0.0

    feet = _resolve_foot_joints(names, parents, offsets, foot_joint_names)
    skeleton = Skeleton(tuple(names), tuple(parents), offsets, feet)
    raw = RawBvhMotion(root_positions, euler, tuple(orders), frame_time)
    return skeleton, raw


def _expect_brace(cur):
    line = cur.next("'{'")
    if line != "{":
        raise BvhParseError(f"expected '{{', got {line!r}", cur.line_no)


def _read_offset(cur):
    line = cur.next("OFFSET")
    parts = line.split()
    if parts[0] != "OFFSET" or len(parts) != 4:
        raise BvhParseError(f"expected 'OFFSET x y z', got {line!r}", cur.line_no)
    try:
        return [float(p) for p in parts[1:]]
    except ValueError:
        raise BvhParseError("non-numeric OFFSET", cur.line_no) from None


_POSITION_CHANNELS = {"Xposition", "Yposition", "Zposition"}
_ROTATION_CHANNELS = {"Xrotation", "Yrotation", "Zrotation"}


def _read_channels(cur, is_root):
    line = cur.next("CHANNELS")
    parts = line.split()
    if parts[0] != "CHANNELS":
        raise BvhParseError(f"expected CHANNELS, got {line!r}", cur.line_no)
    try:
        count = int(parts[1])
    except (IndexError, ValueError):
        raise BvhParseError("cannot parse channel count", cur.line_no) from None
    chans = parts[2:]
    if len(chans) != count:
        raise BvhParseError(
            f"CHANNELS declares {count} but lists {len(chans)}", cur.line_no
        )
    rot = [c for c in chans if c in _ROTATION_CHANNELS]
    pos = [c for c in chans if c in _POSITION_CHANNELS]
    if len(rot) + len(pos) != count or len(rot) != 3:
        raise BvhParseError(f"unsupported channel set {chans}", cur.line_no)
    if pos and not is_root:
        raise BvhParseError("position channels are only supported on the root", cur.line_no)
    return tuple(chans)


def _rotation_order(chans):
    return "".join(c[0] for c in chans if c in _ROTATION_CHANNELS)


_LEFT_HINTS = ("left", "l_", "l")
_FOOT_HINTS = ("heel", "foot", "ankle")
_TOE_HINTS = ("toe",)


def _resolve_foot_joints(names, parents, offsets, foot_joint_names):
    if foot_joint_names is not None:
        if len(foot_joint_names) != CONTACT_CHANNELS:
            raise ValueError("foot_joint_names must list exactly 4 joints")
        try:
            return tuple(names.index(n) for n in foot_joint_names)
        except ValueError as exc:
            raise ValueError(f"unknown foot joint name: {exc}") from None

    def find(side_left, hints):
        for i, name in enumerate(names):
            low = name.lower()
            is_left = low.startswith("left") or low.startswith("l_")
            is_right = low.startswith("right") or low.startswith("r_")
            if side_left and not is_left:
                continue
            if not side_left and not is_right:
                continue
            if any(h in low for h in hints):
                return i
        return None

    guesses = [
        find(True, _FOOT_HINTS),
        find(True, _TOE_HINTS),
        find(False, _FOOT_HINTS),
        find(False, _TOE_HINTS),
    ]
    if all(g is not None for g in guesses):
        return tuple(guesses)

    # Fallback: lowest-resting leaf joints (identity pose), cycled to 4 slots.
    rest = np.zeros((len(names), 3))
    for i in range(1, len(names)):
        rest[i] = rest[parents[i]] + offsets[i]
    has_child = {p for p in parents if p >= 0}
    leaves = [i for i in range(len(names)) if i not in has_child] or [len(names) - 1]
    leaves.sort(key=lambda i: (rest[i, 1], i))
    return tuple(leaves[i % len(leaves)] for i in range(CONTACT_CHANNELS))


# ---------------------------------------------------------------------------
# Feature encoding / BVH export


def encode_clip(skeleton, raw, contact_kwargs=None):
    """Convert parsed BVH channels into a feature-matrix clip.

    Root xz becomes per-frame deltas (frame 0 delta is zero); rotations become
    6D features; contact labels are extracted from forward-kinematics foot
    trajectories.
    """
    fps = 1.0 / raw.frame_time
    k, j, _ = raw.euler_degrees.shape
    root_xz_abs = raw.root_positions[:, [0, 2]]
    deltas = np.zeros_like(root_xz_abs)
    deltas[1:] = np.diff(root_xz_abs, axis=0)
    root_y = raw.root_positions[:, 1]

    sixd = np.zeros((k, j, 6))
    for joint in range(j):
        mats = Rotation.from_euler(
            raw.rotation_orders[joint], raw.euler_degrees[:, joint, :], degrees=True
        ).as_matrix()
        sixd[:, joint, :] = matrix_to_sixd(mats)

    positions = forward_kinematics(skeleton, sixd, root_xz_abs, root_y)
    contacts = compute_contact_labels(
        positions, skeleton.foot_joint_indices, fps, **(contact_kwargs or {})
    )
    frames = pack_frames(deltas, root_y, sixd, contacts)
    return MotionClip(frames, skeleton, fps)


def export_bvh(clip, path=None):
    """Write a clip as BVH text; returns the text when ``path`` is None.

    Contact labels are not representable in BVH and are dropped; they are
    re-extracted on parse.
    """
    skeleton = clip.skeleton
    out = io.StringIO()
    out.write("HIERARCHY\n")
    children = [[] for _ in skeleton.names]
    for i, p in enumerate(skeleton.parents):
        if p >= 0:
            children[p].append(i)

    def write_joint(i, depth):
        kind = "ROOT" if skeleton.parents[i] < 0 else "JOINT"
        pad = "  " * depth
        out.write(f"{pad}{kind} {skeleton.names[i]}\n{pad}{{\n")
        ox, oy, oz = skeleton.offsets[i]
        out.write(f"{pad}  OFFSET {ox:.8f} {oy:.8f} {oz:.8f}\n")
        if kind == "ROOT":
            out.write(
                f"{pad}  CHANNELS 6 Xposition Yposition Zposition "
                "Zrotation Xrotation Yrotation\n"
            )
        else:
            out.write(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation\n")
        if children[i]:
            for c in children[i]:
                write_joint(c, depth + 1)
        else:
            out.write(f"{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0 0 0\n{pad}  }}\n")
        out.write(f"{pad}}}\n")

    write_joint(0, 0)
    out.write("MOTION\n")
    out.write(f"Frames: {len(clip)}\n")
    out.write(f"Frame Time: {1.0 / clip.fps:.8f}\n")

    xz = accumulate_root_xz(clip)
    mats = sixd_to_matrix(clip.rotations)  # (K, J, 3, 3)
    angles = Rotation.from_matrix(mats.reshape(-1, 3, 3)).as_euler(
        EXPORT_EULER_ORDER, degrees=True
    )
    angles = angles.reshape(len(clip), skeleton.num_joints, 3)
    for f in range(len(clip)):
        row = [xz[f, 0], clip.root_y[f], xz[f, 1]]
        row.extend(angles[f].reshape(-1))
        out.write(" ".join(f"{v:.8f}" for v in row) + "\n")

    text = out.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# Downsampling, windowing, normalization


def downsample(clip, source_fps, target_fps):
    """Keep every (source_fps // target_fps)-th frame.

    Root xz deltas are re-derived from the accumulated trajectory so the
    decimated clip traces the same path at the new frame rate.
    """
    if source_fps % target_fps != 0:
        raise DatasetConfigError(
            f"source fps {source_fps} not divisible by target fps {target_fps}"
        )
    if abs(clip.fps - source_fps) > 1e-6:
        raise DatasetConfigError(
            f"clip is at {clip.fps} fps, expected source fps {source_fps}"
        )
    ratio = source_fps // target_fps
    if ratio == 1:
        return MotionClip(clip.frames.copy(), clip.skeleton, float(target_fps))
    frames = clip.frames[::ratio].copy()
    xz_abs = accumulate_root_xz(clip)[::ratio]
    frames[0, 0:2] = clip.frames[0, 0:2]
    frames[1:, 0:2] = np.diff(xz_abs, axis=0)
    return MotionClip(frames, clip.skeleton, float(target_fps))


def make_windows(clip, window_len, stride, source_id="clip"):
    """Fixed-length windows starting at 0, stride, 2*stride, ...

    Clips shorter than ``window_len`` yield no windows.
    """
    k = len(clip)
    windows = []
    if k < window_len:
        return windows
    for start in range(0, k - window_len + 1, stride):
        sub = MotionClip(clip.frames[start : start + window_len].copy(), clip.skeleton, clip.fps)
        windows.append(TrainingWindow(sub, source_id, start))
    return windows


STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean/std. Contact channels (the last 4) are exempt: their
    mean is pinned to 0 and std to 1 so labels pass through unchanged."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, stacked_frames):
        """Fit from an (N, F) or (N, K, F) array of training frames only."""
        x = np.asarray(stacked_frames, dtype=np.float64).reshape(-1, stacked_frames.shape[-1])
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), STD_FLOOR)
        mean[-CONTACT_CHANNELS:] = 0.0
        std[-CONTACT_CHANNELS:] = 1.0
        return cls(mean, std)

    def normalize(self, frames):
        return (np.asarray(frames) - self.mean) / self.std

    def denormalize(self, frames):
        return np.asarray(frames) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def normalize_clip(clip, stats):
    return MotionClip(stats.normalize(clip.frames), clip.skeleton, clip.fps)


def denormalize_clip(clip, stats):
    return MotionClip(stats.denormalize(clip.frames), clip.skeleton, clip.fps)


# ---------------------------------------------------------------------------
# Synthetic gait dataset


def toy_skeleton(leg_length=0.8, hip_width=0.12):
    """Five-joint biped: a root with two single-segment legs.

    Heel and toe share a joint on each side, so the four contact slots map to
    (left foot, left foot, right foot, right foot).
    """
    names = ("root", "left_leg", "left_foot", "right_leg", "right_foot")
    parents = (-1, 0, 1, 0, 3)
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, hip_width],
            [0.0, -leg_length, 0.0],
            [0.0, 0.0, -hip_width],
            [0.0, -leg_length, 0.0],
        ]
    )
    return Skeleton(names, parents, offsets, (2, 2, 4, 4))


def generate_toy_dataset(
    seed,
    n_clips,
    clip_len,
    fps=30.0,
    leg_length=0.8,
    hip_width=0.12,
    swing_amplitude=None,
    lift_amplitude=0.6,
    period=None,
):
    """Procedural sinusoidal gait clips with analytically known contacts.

    Each clip is a walk cycle on the five-joint toy skeleton: the stance leg
    is pinned exactly to the ground (the root translates and bobs to
    compensate), while the swing leg tilts sideways to lift clear of the
    contact thresholds. Stance phases alternate every half period, so contact
    labels are known in closed form. A zero swing amplitude produces a static
    pose with all-ones contacts.

    Returns ``(clips, contacts)`` where ``contacts[i]`` is the (K, 4)
    ground-truth label array for ``clips[i]`` (also stored in the clip's
    contact channels). Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    skeleton = toy_skeleton(leg_length, hip_width)
    clips, contacts_out = [], []
    for _ in range(n_clips):
        amp = swing_amplitude if swing_amplitude is not None else rng.uniform(0.25, 0.35)
        p = period if period is not None else int(rng.choice([32, 40, 48]))
        heading = rng.uniform(0.0, 2.0 * np.pi)
        clip, contacts = _toy_gait_clip(
            clip_len, fps, skeleton, leg_length, amp, lift_amplitude, p, heading
        )
        clips.append(clip)
        contacts_out.append(contacts)
    return clips, contacts_out


def _toy_gait_clip(k, fps, skeleton, leg_length, amp, lift, period, heading):
    t = np.arange(k)
    phi = 2.0 * np.pi * t / period
    half = np.mod(phi, 2.0 * np.pi) < np.pi  # True -> left stance

    if amp == 0.0:
        theta_l = theta_r = lam_l = lam_r = np.zeros(k)
        left_stance = np.ones(k, dtype=bool)
    else:
        theta_l = amp * np.sin(phi)
        theta_r = -theta_l
        swing_l = ~half
        swing_r = half
        lam_l = lift * np.sin(phi) ** 2 * swing_l
        lam_r = lift * np.sin(phi) ** 2 * swing_r
        left_stance = half

    heading_rot = Rotation.from_euler("y", heading).as_matrix()
    rot_l = _leg_rotation(theta_l, lam_l)
    rot_r = _leg_rotation(theta_r, -lam_r)
    eye = np.broadcast_to(np.eye(3), (k, 3, 3))

    # Foot position relative to the root, in world axes (root carries heading).
    hip_l = skeleton.offsets[1]
    hip_r = skeleton.offsets[3]
    seg = np.array([0.0, -leg_length, 0.0])
    rel_l = (hip_l + np.einsum("kij,j->ki", rot_l, seg)) @ heading_rot.T
    rel_r = (hip_r + np.einsum("kij,j->ki", rot_r, seg)) @ heading_rot.T

    rel_stance = np.where(left_stance[:, None], rel_l, rel_r)
    root_y = -rel_stance[:, 1]  # stance foot pinned at height exactly 0

    # Pin the stance foot in xz: the root delta cancels the stance foot's
    # relative motion; at stance switches carry the previous delta forward.
    deltas = np.zeros((k, 2))
    rel_xz = rel_stance[:, [0, 2]]
    same_leg = np.concatenate([[False], left_stance[1:] == left_stance[:-1]])
    for i in range(1, k):
        if same_leg[i]:
            deltas[i] = rel_xz[i - 1] - rel_xz[i]
        else:
            deltas[i] = deltas[i - 1]

    rotations = np.zeros((k, skeleton.num_joints, 6))
    rotations[:, 0, :] = matrix_to_sixd(np.broadcast_to(heading_rot, (k, 3, 3)))
    rotations[:, 1, :] = matrix_to_sixd(rot_l)
    rotations[:, 2, :] = matrix_to_sixd(eye)
    rotations[:, 3, :] = matrix_to_sixd(rot_r)
    rotations[:, 4, :] = matrix_to_sixd(eye)

    if amp == 0.0:
        contacts = np.ones((k, 4))
    else:
        left = left_stance.astype(np.float64)
        contacts = np.stack([left, left, 1.0 - left, 1.0 - left], axis=1)

    frames = pack_frames(deltas, root_y, rotations, contacts)
    return MotionClip(frames, skeleton, fps), contacts


def _leg_rotation(theta, lam):
    """Rz(theta) @ Rx(lam) for per-frame angle vectors."""
    angles = np.stack([theta, lam], axis=-1)
    return Rotation.from_euler("zx", angles).as_matrix()


# ---------------------------------------------------------------------------
# Dataset cache


def save_dataset(path, windows, stats, skeleton, fps, config=None):
    """Write windows + normalization stats + skeleton to a single npz cache."""
    arrays = np.stack([w.clip.frames for w in windows]).astype(np.float32)
    meta = {
        "magic": CACHE_MAGIC,
        "version": CACHE_VERSION,
        "fps": fps,
        "skeleton": skeleton.to_dict(),
        "normalization": stats.to_dict(),
        "config": config or {},
        "source_ids": [w.source_id for w in windows],
    }
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            meta=np.array(json.dumps(meta)),
            windows=arrays,
            starts=np.array([w.start for w in windows], dtype=np.int64),
        )
    os.replace(tmp, path)


def load_dataset(path):
    """Read a dataset cache; returns (windows, stats, skeleton, fps)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("magic") != CACHE_MAGIC:
            raise ValueError(f"{path} is not a dataset cache (bad magic)")
        if meta.get("version") != CACHE_VERSION:
            raise ValueError(
                f"unsupported cache version {meta.get('version')} (expected {CACHE_VERSION})"
            )
        arrays = data["windows"]
        starts = data["starts"]
    skeleton = Skeleton.from_dict(meta["skeleton"])
    stats = NormalizationStats.from_dict(meta["normalization"])
    fps = float(meta["fps"])
    windows = [
        TrainingWindow(MotionClip(arrays[i], skeleton, fps), meta["source_ids"][i], int(starts[i]))
        for i in range(arrays.shape[0])
    ]
    return windows, stats, skeleton, fps
