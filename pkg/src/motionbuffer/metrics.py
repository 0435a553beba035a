"""Collapse and foot-slide metrics for generated motion.

The windowed pose variance measures how much the pose (root-relative joint
positions) moves inside a sliding window; a series that sinks toward zero
flags frozen/collapsed motion. Foot slide measures horizontal foot travel on
frames labeled as in contact.
"""

from dataclasses import dataclass

import numpy as np

from .motion import world_joint_positions


@dataclass(frozen=True)
class MetricReport:
    window_starts: np.ndarray
    windowed_variance: np.ndarray
    foot_slide: float
    n_frames: int

    def summary(self):
        wv = self.windowed_variance
        return {
            "n_frames": self.n_frames,
            "n_windows": int(wv.size),
            "variance_mean": float(wv.mean()) if wv.size else float("nan"),
            "variance_min": float(wv.min()) if wv.size else float("nan"),
            "variance_max": float(wv.max()) if wv.size else float("nan"),
            "foot_slide": self.foot_slide,
        }


def windowed_pose_variance(clip, window, stride=None):
    """Per-window mean variance of root-relative joint positions.

    Windows start at 0, stride, 2*stride, ... (default stride: window // 2);
    within each window the per-channel variance over frames is averaged over
    joints and coordinates.

    Returns ``(starts, variances)``.
    """
    if window > len(clip):
        raise ValueError(f"window {window} exceeds clip length {len(clip)}")
    if stride is None:
        stride = max(1, window // 2)
    positions = world_joint_positions(clip, clamp=True)  # (K, J, 3)
    rel = positions - positions[:, 0:1, :]
    starts = np.arange(0, len(clip) - window + 1, stride)
    variances = np.array(
        [rel[s : s + window].var(axis=0).mean() for s in starts]
    )
    return starts, variances


def foot_slide_metric(clip, contact_threshold=0.5):
    """Mean horizontal foot displacement (m/frame) over in-contact frames.

    A (frame, foot) pair counts when its contact label is at least
    ``contact_threshold``; the displacement is measured from that frame to the
    next. Returns 0.0 when nothing is in contact.
    """
    if len(clip) < 2:
        raise ValueError("foot slide needs at least 2 frames")
    positions = world_joint_positions(clip, clamp=True)
    feet = positions[:, list(clip.skeleton.foot_joint_indices), :]  # (K, 4, 3)
    horiz = feet[:, :, [0, 2]]
    disp = np.linalg.norm(np.diff(horiz, axis=0), axis=-1)  # (K-1, 4)
    in_contact = clip.contacts[:-1] >= contact_threshold
    if not np.any(in_contact):
        return 0.0
    return float(disp[in_contact].mean())


def evaluate_clip(clip, window, stride=None):
    starts, variances = windowed_pose_variance(clip, window, stride)
    return MetricReport(
        window_starts=starts,
        windowed_variance=variances,
        foot_slide=foot_slide_metric(clip),
        n_frames=len(clip),
    )
