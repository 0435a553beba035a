"""Autoregressive inference through a rolling buffer of noisy frames.

The buffer holds K frames whose noise levels are pinned to the staircase
[1..K]: frame 1 is one step from clean, frame K is (near-)pure noise. Each
step runs one forward pass, denoises every frame by one level, pops the now
clean first frame, shifts the rest down, and pushes a fresh standard-normal
frame at the end, so the level vector never changes.

Guided generation and trajectory control overwrite buffer slots ahead of the
pop with q-sampled target content, following the replacement window
``n + gap <= target_index <= n + K`` at global step ``n`` (default gap 5, so
slots 1..4 are always left free to smooth the transition).

Everything here operates in the model's (normalized) feature space; use
:func:`synthesize` for the clip-in/clip-out wrapper.
"""

from dataclasses import dataclass, field

import numpy as np

from .motion import MotionClip
from .schedules import monotonic_levels, posterior_step, q_sample

DEFAULT_GUIDE_GAP = 5


class BufferDivergedError(RuntimeError):
    pass


class GuideValidationError(ValueError):
    pass


@dataclass
class MotionBuffer:
    """Inference state: K frames at fixed noise levels [1..K]."""

    frames: np.ndarray
    levels: np.ndarray
    emitted_count: int = 0
    inserted_count: int = 0
    tags: list = field(default_factory=list)
    last_emitted_tag: object = None

    @property
    def window(self):
        return self.frames.shape[0]

    def check_invariants(self):
        k = self.window
        if not np.array_equal(self.levels, np.arange(1, k + 1)):
            raise RuntimeError(f"buffer level vector deviated from [1..{k}]: {self.levels}")
        if not np.all(np.isfinite(self.frames)):
            raise BufferDivergedError("buffer contains non-finite frames")


@dataclass(frozen=True)
class MotionGuide:
    """A clip to perform starting at global output frame ``start`` (>= K).

    Guide frame j (1-based) targets global index ``start + j`` during
    replacement and surfaces as output frame ``start + j - 1``, so the guide
    occupies output frames [start, start + len - 1].
    """

    frames: np.ndarray
    start: int

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames))
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise GuideValidationError("guide frames must be a non-empty (L, F) array")

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class TrajectorySpec:
    """Root channels (xz displacement + height) for output frames 1..N."""

    root_channels: np.ndarray

    def __post_init__(self):
        rc = np.asarray(self.root_channels, dtype=np.float64)
        if rc.ndim != 2 or rc.shape[1] != 3:
            raise ValueError("trajectory must be an (N, 3) array")
        object.__setattr__(self, "root_channels", rc)

    def __len__(self):
        return self.root_channels.shape[0]


def init_buffer(primer, schedule, rng):
    """Noise a clean K-frame primer progressively: frame i to level i."""
    primer = np.asarray(primer)
    k = primer.shape[0]
    if k != schedule.T:
        raise ValueError(f"primer has {k} frames but the schedule has T={schedule.T}")
    levels = monotonic_levels(k, schedule.T)
    frames = q_sample(primer, levels, schedule, rng)
    return MotionBuffer(
        frames=frames,
        levels=levels,
        inserted_count=k,
        tags=[f"primer{i}" for i in range(1, k + 1)],
    )


def step(buffer, model, schedule, rng, stochastic=False, update="posterior", replace=None):
    """Advance the buffer by one frame; returns ``(buffer, emitted_frame)``.

    One forward pass predicts clean frames for every slot; each slot is then
    denoised one level (``update="posterior"``: DDPM posterior step toward
    the prediction; ``update="literal"``: the raw prediction re-noised to the
    destination level). ``replace`` may mutate the pre-shift candidate state
    (guided generation / trajectory control hook).
    """
    buffer.check_invariants()
    k = buffer.window
    pred = np.asarray(model.predict_clean(buffer.frames, buffer.levels))
    if not np.all(np.isfinite(pred)):
        raise BufferDivergedError(
            "denoiser returned non-finite prediction; buffer stats: "
            f"min={buffer.frames.min():.3g} max={buffer.frames.max():.3g} "
            f"emitted={buffer.emitted_count}"
        )

    if update == "posterior":
        candidate = posterior_step(
            buffer.frames, pred, buffer.levels, schedule, rng=rng, stochastic=stochastic
        )
    elif update == "literal":
        candidate = q_sample(pred, buffer.levels - 1, schedule, rng)
    else:
        raise ValueError(f"unknown update mode {update!r}")

    if replace is not None:
        replace(candidate)

    emitted = candidate[0].copy()
    buffer.frames[:-1] = candidate[1:]
    buffer.frames[-1] = rng.standard_normal(buffer.frames.shape[1])
    buffer.emitted_count += 1
    buffer.inserted_count += 1
    if buffer.tags:
        buffer.last_emitted_tag = buffer.tags[0]
        buffer.tags = buffer.tags[1:] + [buffer.emitted_count]
    buffer.check_invariants()
    return buffer, emitted


def generate(model, primer, n_frames, schedule, rng, stochastic=False, update="posterior"):
    """Emit ``n_frames`` frames from a clean primer (both in model space)."""
    return _run(model, primer, n_frames, schedule, rng, stochastic, update, None, None)


def guide_replacement_positions(n, window, guides, gap=DEFAULT_GUIDE_GAP):
    """1-based buffer positions replaced at global step ``n``.

    Returns ``{position: (guide_index, frame_index)}`` (frame index 1-based)
    for every guide frame whose target ``start + j`` lies in
    ``[n + gap, n + window]``.
    """
    out = {}
    for gi, guide in enumerate(guides):
        for j in range(1, guide.length + 1):
            target = guide.start + j
            if n + gap <= target <= n + window:
                out[target - n] = (gi, j)
    return out


def validate_guides(guides, window):
    prev_end = None
    for guide in guides:
        if guide.start < window:
            raise GuideValidationError(
                f"guide start {guide.start} must be >= the buffer window {window}"
            )
        if prev_end is not None and guide.start < prev_end:
            raise GuideValidationError(
                f"guides overlap: previous ends at {prev_end}, next starts at {guide.start}"
            )
        prev_end = guide.start + guide.length
    return list(guides)


def generate_guided(
    model,
    primer,
    guides,
    n_frames,
    schedule,
    rng,
    stochastic=False,
    update="posterior",
    gap=DEFAULT_GUIDE_GAP,
    on_replace=None,
):
    """Generation with recursive guide replacement.

    Eligible guide frames are q-sampled to their destination slot's noise
    level (fresh noise every step) and overwrite the candidate state after
    denoising, before the pop/shift. ``on_replace(n, positions)`` is invoked
    with each step's replacement map (instrumentation hook).
    """
    guides = validate_guides(guides, len(primer))

    def replace(n, candidate):
        positions = guide_replacement_positions(n, len(primer), guides, gap)
        for pos, (gi, j) in positions.items():
            frame = guides[gi].frames[j - 1]
            level = np.array(pos)
            candidate[pos - 1] = q_sample(frame, level, schedule, rng)
        if on_replace is not None:
            on_replace(n, positions)

    return _run(model, primer, n_frames, schedule, rng, stochastic, update, replace, None)


def generate_trajectory(
    model,
    primer,
    trajectory,
    n_frames,
    schedule,
    rng,
    stochastic=False,
    update="posterior",
    gap=DEFAULT_GUIDE_GAP,
):
    """Generation with the root channels pinned to a target trajectory.

    Buffer slot p at step n will surface as output frame ``n + p - 1``; while
    that index is covered by the trajectory (and inside the replacement
    window), the slot's three root channels are overwritten with the
    q-sampled trajectory values. Rotation and contact channels are untouched.
    """
    traj = trajectory if isinstance(trajectory, TrajectorySpec) else TrajectorySpec(trajectory)
    n_target = len(traj)
    k = len(primer)

    def replace(n, candidate):
        for pos in range(gap, k + 1):
            out_index = n + pos - 1
            if out_index > n_target:
                break
            level = np.array(pos)
            noised = q_sample(traj.root_channels[out_index - 1], level, schedule, rng)
            candidate[pos - 1, 0:3] = noised

    return _run(model, primer, n_frames, schedule, rng, stochastic, update, replace, None)


def _run(model, primer, n_frames, schedule, rng, stochastic, update, replace, buffer):
    primer = np.asarray(primer)
    k = primer.shape[0]
    if hasattr(model, "config") and getattr(model.config, "window", k) != k:
        raise ValueError(
            f"primer length {k} does not match the model window {model.config.window}"
        )
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    if buffer is None:
        buffer = init_buffer(primer, schedule, rng)
    out = np.empty((n_frames, primer.shape[1]), dtype=primer.dtype)
    for i in range(n_frames):
        n = buffer.emitted_count + 1  # global step, 1-based
        hook = (lambda candidate, n=n: replace(n, candidate)) if replace else None
        _, emitted = step(
            buffer, model, schedule, rng, stochastic=stochastic, update=update, replace=hook
        )
        out[i] = emitted
    return out, buffer


# ---------------------------------------------------------------------------
# Clip-level wrapper


def synthesize(
    model,
    schedule,
    stats,
    primer_clip,
    n_frames,
    rng,
    stochastic=True,
    update="posterior",
    guides=None,
    trajectory=None,
    gap=DEFAULT_GUIDE_GAP,
):
    """Generate a denormalized clip from a clean primer clip.

    ``guides`` is a list of ``(clip, start_frame)`` pairs in real units;
    ``trajectory`` an (N, 3) array of real-unit root channels. Both are
    normalized with the model's statistics before injection.
    """
    skeleton = primer_clip.skeleton
    primer = stats.normalize(primer_clip.frames)
    if n_frames < 1:
        raise ValueError("synthesize needs n_frames >= 1 (clips cannot be empty)")
    if guides is not None and trajectory is not None:
        raise ValueError("pass either guides or a trajectory, not both")
    if guides is not None:
        guide_objs = [
            MotionGuide(stats.normalize(clip.frames), start) for clip, start in guides
        ]
        frames, _ = generate_guided(
            model, primer, guide_objs, n_frames, schedule, rng,
            stochastic=stochastic, update=update, gap=gap,
        )
    elif trajectory is not None:
        root = (np.asarray(trajectory) - stats.mean[0:3]) / stats.std[0:3]
        frames, _ = generate_trajectory(
            model, primer, root, n_frames, schedule, rng,
            stochastic=stochastic, update=update, gap=gap,
        )
    else:
        frames, _ = generate(
            model, primer, n_frames, schedule, rng, stochastic=stochastic, update=update
        )
    return MotionClip(stats.denormalize(frames), skeleton, primer_clip.fps)
