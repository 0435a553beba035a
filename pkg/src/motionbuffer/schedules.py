"""Variance schedules, per-frame noise levels, forward noising, posterior step.

Noise levels are integers in {0, ..., T}; level 0 means "already clean". The
schedule's cumulative signal fraction ``alpha_bar`` is indexed by level, with
``alpha_bar[0] = 1`` so level-0 frames pass through unchanged. Levels vary per
frame: the training-time assignment is either i.i.d. uniform over {0..T}
(random schedule) or the fixed staircase [1..K] (monotonic schedule), which is
the pattern the inference buffer is pinned to.
"""

from dataclasses import dataclass

import numpy as np


class ScheduleConfigError(ValueError):
    """Raised for invalid schedule configuration."""


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances ``betas`` (length T, values in (0,1)) plus the
    derived cumulative products ``alpha_bars`` (length T+1, ``alpha_bars[0]=1``)."""

    betas: np.ndarray
    alpha_bars: np.ndarray = None

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleConfigError("betas must be a non-empty 1-D vector")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleConfigError("betas must lie strictly inside (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self):
        return self.betas.size

    def beta(self, t):
        """beta at level t (t in 1..T)."""
        return self.betas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t)]


def build_variance_schedule(kind, T):
    """Construct a named schedule.

    ``linear`` interpolates beta from 1e-4*(1000/T) to 0.02*(1000/T) (the
    standard 1000-step endpoints rescaled so total noise stays comparable for
    shorter horizons), clamped into (0, 0.999). ``cosine`` uses the squared
    cosine alpha_bar recipe with offset 0.008.
    """
    if T < 1:
        raise ScheduleConfigError("T must be >= 1")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        betas = np.clip(betas, 1e-12, 0.999)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        betas = np.clip(betas, 1e-12, 0.999)
    else:
        raise ScheduleConfigError(f"unknown schedule kind: {kind!r}")
    return VarianceSchedule(betas)


def sample_random_levels(rng, K, T):
    """Per-frame levels drawn i.i.d. uniform over the integers {0, ..., T}."""
    if T < 1:
        raise ScheduleConfigError("T must be >= 1")
    return rng.integers(0, T + 1, size=K)


def monotonic_levels(K, T=None):
    """The staircase level vector [1, 2, ..., K]; requires K == T."""
    if T is not None and T != K:
        raise ScheduleConfigError(
            f"monotonic levels need K == T (got K={K}, T={T})"
        )
    return np.arange(1, K + 1)


def q_sample(frames, levels, schedule, rng, noise=None):
    """Noise frames forward to their per-frame levels.

    Frame i becomes ``sqrt(alpha_bar(t_i)) * f_i + sqrt(1 - alpha_bar(t_i)) * eps``
    with standard-normal ``eps``; level-0 frames are returned unchanged.
    ``frames`` may carry leading batch dimensions; ``levels`` must match all
    but the last (channel) axis.
    """
    frames = np.asarray(frames)
    levels = np.asarray(levels)
    if levels.shape != frames.shape[:-1]:
        raise ValueError(
            f"levels shape {levels.shape} must match frame axes {frames.shape[:-1]}"
        )
    if levels.min() < 0 or levels.max() > schedule.T:
        raise ValueError("levels out of range for this schedule")
    if noise is None:
        noise = rng.standard_normal(frames.shape)
    ab = schedule.alpha_bars[levels][..., None]
    return np.sqrt(ab) * frames + np.sqrt(1.0 - ab) * noise


def posterior_step(frame_noisy, frame_clean_pred, level, schedule, rng=None, stochastic=False):
    """One reverse-process step from ``level`` to ``level - 1``.

    Returns the posterior mean of q(m_{t-1} | m_t, m_0_hat),

        sqrt(alpha_bar(t-1)) * beta_t / (1 - alpha_bar(t)) * m_0_hat
      + sqrt(alpha_t) * (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * m_t,

    plus ``sqrt(beta_t) * eps`` when ``stochastic`` (the fixed reverse
    variance). The step into level 0 is always deterministic: at t=1 the mean
    collapses onto the clean prediction, so the result is clean.

    ``level`` may be a scalar or a vector matching leading frame axes.
    """
    frame_noisy = np.asarray(frame_noisy)
    frame_clean_pred = np.asarray(frame_clean_pred)
    level = np.asarray(level)
    if np.any(level < 1) or np.any(level > schedule.T):
        raise ValueError(f"posterior step needs level in 1..T, got {level}")

    ab_t = schedule.alpha_bars[level]
    ab_prev = schedule.alpha_bars[level - 1]
    beta_t = schedule.betas[level - 1]
    alpha_t = 1.0 - beta_t
    denom = 1.0 - ab_t
    coef_clean = np.sqrt(ab_prev) * beta_t / denom
    coef_noisy = np.sqrt(alpha_t) * (1.0 - ab_prev) / denom
    if level.ndim:
        coef_clean = coef_clean[..., None]
        coef_noisy = coef_noisy[..., None]
    mean = coef_clean * frame_clean_pred + coef_noisy * frame_noisy

    if stochastic:
        if rng is None:
            raise ValueError("stochastic posterior step needs an rng")
        eps = rng.standard_normal(mean.shape)
        sigma = np.sqrt(beta_t) * (level > 1)
        if level.ndim:
            sigma = sigma[..., None]
        mean = mean + sigma * eps
    return mean
