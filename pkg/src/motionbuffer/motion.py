"""Skeleton and motion-clip data types, forward kinematics, contact labels.

Feature layout per frame (width ``3 + 6*J + 4``):

    [0:2]   root displacement in the world xz-plane, meters per frame (delta)
    [2]     root height (y), meters, absolute
    [3:3+6J] per-joint 6D rotation features, local to the parent joint
    [-4:]   foot contact labels (left heel, left toe, right heel, right toe)

y is up; the two xz channels map to world (x, z). Root displacement is stored
as a per-frame delta so clips are invariant to where the motion starts; deltas
are accumulated back into absolute positions on export.
"""

from dataclasses import dataclass, field

import numpy as np

from .rotations import sixd_to_matrix

ROOT_CHANNELS = 3
CONTACT_CHANNELS = 4
ROTATION_FEATURES = 6

CONTACT_HEIGHT_THRESHOLD = 0.05  # meters
CONTACT_SPEED_THRESHOLD = 0.15  # meters/second


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy with fixed bone offsets.

    ``parents[i]`` is the parent joint index (-1 for the single root) and must
    be strictly less than ``i``. ``offsets`` are bone offsets in meters.
    ``foot_joint_indices`` lists the four contact joints
    (left heel, left toe, right heel, right toe); indices may repeat for
    skeletons that do not distinguish heel from toe.
    """

    names: tuple
    parents: tuple
    offsets: np.ndarray
    foot_joint_indices: tuple

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(
            self, "foot_joint_indices", tuple(int(i) for i in self.foot_joint_indices)
        )
        j = len(self.names)
        if len(self.parents) != j or offsets.shape != (j, 3):
            raise ValueError("names, parents and offsets must agree on joint count")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("skeleton offsets must be finite")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("exactly one root joint is required, at index 0")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise ValueError(
                    f"joint {i} has parent {p}; parents must precede children"
                )
        if len(self.foot_joint_indices) != CONTACT_CHANNELS:
            raise ValueError(f"exactly {CONTACT_CHANNELS} foot joints are required")
        for idx in self.foot_joint_indices:
            if not 0 <= idx < j:
                raise ValueError(f"foot joint index {idx} out of range")

    @property
    def num_joints(self):
        return len(self.names)

    @property
    def feature_width(self):
        return ROOT_CHANNELS + ROTATION_FEATURES * self.num_joints + CONTACT_CHANNELS

    @property
    def rotation_slice(self):
        return slice(ROOT_CHANNELS, ROOT_CHANNELS + ROTATION_FEATURES * self.num_joints)

    @property
    def contact_slice(self):
        return slice(self.feature_width - CONTACT_CHANNELS, self.feature_width)

    def to_dict(self):
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "foot_joint_indices": list(self.foot_joint_indices),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["names"]),
            tuple(d["parents"]),
            np.asarray(d["offsets"], dtype=np.float64),
            tuple(d["foot_joint_indices"]),
        )


@dataclass
class MotionClip:
    """A K-frame feature matrix bound to its skeleton and frame rate."""

    frames: np.ndarray
    skeleton: Skeleton
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (K, F), got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        if self.frames.shape[1] != self.skeleton.feature_width:
            raise ValueError(
                f"feature width {self.frames.shape[1]} does not match skeleton "
                f"(expected {self.skeleton.feature_width})"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("clip contains non-finite values")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def root_xz(self):
        return self.frames[:, 0:2]

    @property
    def root_y(self):
        return self.frames[:, 2]

    @property
    def rotations(self):
        k = self.frames.shape[0]
        j = self.skeleton.num_joints
        return self.frames[:, self.skeleton.rotation_slice].reshape(k, j, ROTATION_FEATURES)

    @property
    def contacts(self):
        return self.frames[:, self.skeleton.contact_slice]

    def copy(self):
        return MotionClip(self.frames.copy(), self.skeleton, self.fps)


def pack_frames(root_xz, root_y, rotations, contacts):
    """Assemble a (K, F) feature matrix from its components."""
    root_xz = np.asarray(root_xz, dtype=np.float64)
    root_y = np.asarray(root_y, dtype=np.float64).reshape(-1, 1)
    k = root_xz.shape[0]
    rotations = np.asarray(rotations, dtype=np.float64).reshape(k, -1)
    contacts = np.asarray(contacts, dtype=np.float64)
    return np.concatenate([root_xz, root_y, rotations, contacts], axis=1)


def forward_kinematics(skeleton, rotations, root_xz, root_y, clamp=False):
    """Global joint positions for one or more poses.

    Parameters
    ----------
    rotations : array_like, shape (..., J, 6)
        Per-joint 6D rotation features, local to each joint's parent.
    root_xz : array_like, shape (..., 2)
        Root position in the world xz-plane (whatever the two root channels
        hold for the pose; no accumulation happens here).
    root_y : array_like, shape (...)
        Root height.
    clamp : bool
        Passed to the 6D decoder; see :func:`rotations.sixd_to_matrix`.

    Returns
    -------
    ndarray, shape (..., J, 3)
        Joint positions: each child is placed at
        ``parent_position + parent_global_rotation @ offset``.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    root_xz = np.asarray(root_xz, dtype=np.float64)
    root_y = np.asarray(root_y, dtype=np.float64)
    j = skeleton.num_joints
    if rotations.shape[-2:] != (j, ROTATION_FEATURES):
        raise ValueError(f"rotations must have shape (..., {j}, 6)")

    local = sixd_to_matrix(rotations, clamp=clamp)  # (..., J, 3, 3)
    batch = rotations.shape[:-2]
    root_pos = np.empty(batch + (3,))
    root_pos[..., 0] = root_xz[..., 0]
    root_pos[..., 1] = root_y
    root_pos[..., 2] = root_xz[..., 1]

    global_rot = np.empty(batch + (j, 3, 3))
    positions = np.empty(batch + (j, 3))
    global_rot[..., 0, :, :] = local[..., 0, :, :]
    positions[..., 0, :] = root_pos
    for i in range(1, j):
        p = skeleton.parents[i]
        parent_rot = global_rot[..., p, :, :]
        offset = skeleton.offsets[i]
        positions[..., i, :] = positions[..., p, :] + (parent_rot @ offset)
        global_rot[..., i, :, :] = parent_rot @ local[..., i, :, :]
    return positions


def accumulate_root_xz(clip):
    """Absolute root xz positions from the per-frame displacement channels."""
    return np.cumsum(clip.root_xz, axis=0)


def world_joint_positions(clip, clamp=False):
    """(K, J, 3) global joint positions with the root trajectory accumulated."""
    xz = accumulate_root_xz(clip)
    return forward_kinematics(clip.skeleton, clip.rotations, xz, clip.root_y, clamp=clamp)


def compute_contact_labels(
    positions,
    foot_joint_indices,
    fps,
    height_threshold=CONTACT_HEIGHT_THRESHOLD,
    speed_threshold=CONTACT_SPEED_THRESHOLD,
):
    """Binary contact labels from global joint positions.

    A foot joint is in contact when it is both low (height below
    ``height_threshold``) and slow (speed below ``speed_threshold`` in m/s).
    The last frame reuses the previous frame's velocity estimate.

    Parameters
    ----------
    positions : array_like, shape (K, J, 3)
    foot_joint_indices : sequence of 4 joint indices

    Returns
    -------
    ndarray, shape (K, 4), values in {0.0, 1.0}
    """
    positions = np.asarray(positions, dtype=np.float64)
    k = positions.shape[0]
    if k < 2:
        raise ValueError("contact extraction needs at least 2 frames")
    feet = positions[:, list(foot_joint_indices), :]  # (K, 4, 3)
    low = feet[:, :, 1] < height_threshold
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=-1) * fps  # (K-1, 4)
    speed = np.concatenate([speed, speed[-1:]], axis=0)
    slow = speed < speed_threshold
    return (low & slow).astype(np.float64)
