"""Scikit-learn style front end: fit on motion windows, sample new motion.

``MotionDiffusionGenerator`` follows the estimator conventions (constructor
params stored verbatim, ``get_params``/``set_params`` via ``BaseEstimator``,
fitted attributes carry a trailing underscore), in the spirit of generative
estimators like ``KernelDensity``: ``fit`` trains the denoiser, ``sample``
streams new frames from a primer.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import NormalizationStats
from .motion import MotionClip
from .sampling import synthesize
from .training import TrainConfig, init_train_state, train


def _validate_windows(X, skeleton):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected windows of shape (n, K, F), got {X.shape}")
    if X.shape[2] != skeleton.feature_width:
        raise ValueError(
            f"feature width {X.shape[2]} does not match the skeleton "
            f"({skeleton.feature_width})"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain non-finite values")
    return X


class MotionDiffusionGenerator(BaseEstimator):
    """Denoising generator for fixed-skeleton motion windows.

    Parameters mirror :class:`training.TrainConfig`; ``fit`` expects an
    (n_windows, K, F) array of clean, unnormalized feature windows.
    """

    def __init__(
        self,
        skeleton=None,
        fps=30.0,
        n_steps=2000,
        p_random=2.0 / 3.0,
        lambda_diff=1.0,
        lambda_pos=1.0,
        lambda_contact=0.1,
        learning_rate=1e-4,
        batch_size=16,
        channels=(64, 128, 256),
        schedule="linear",
        seed=0,
        stochastic_sampling=True,
    ):
        self.skeleton = skeleton
        self.fps = fps
        self.n_steps = n_steps
        self.p_random = p_random
        self.lambda_diff = lambda_diff
        self.lambda_pos = lambda_pos
        self.lambda_contact = lambda_contact
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.channels = channels
        self.schedule = schedule
        self.seed = seed
        self.stochastic_sampling = stochastic_sampling

    def fit(self, X, y=None):
        if self.skeleton is None:
            raise ValueError("a Skeleton must be supplied at construction")
        X = _validate_windows(X, self.skeleton)
        window = X.shape[1]
        config = TrainConfig(
            total_steps=self.n_steps,
            window=window,
            p_random=self.p_random,
            lambda_diff=self.lambda_diff,
            lambda_pos=self.lambda_pos,
            lambda_contact=self.lambda_contact,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
            schedule_kind=self.schedule,
            channels=tuple(self.channels),
        )
        stats = NormalizationStats.fit(X)
        state = init_train_state(config, stats, self.skeleton, self.fps)
        train(state, stats.normalize(X).astype(np.float32))
        self.state_ = state
        self.stats_ = stats
        self.window_ = window
        return self

    def sample(self, primer, n_frames, seed=None):
        """Generate ``n_frames`` new frames from a clean primer.

        ``primer`` is a (K, F) array or :class:`MotionClip` of exactly the
        fitted window length; returns a :class:`MotionClip`.
        """
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before sample")
        if isinstance(primer, MotionClip):
            primer_clip = primer
        else:
            primer = np.asarray(primer, dtype=np.float64)
            primer_clip = MotionClip(primer, self.skeleton, self.fps)
        if len(primer_clip) != self.window_:
            raise ValueError(
                f"primer length {len(primer_clip)} does not match the fitted "
                f"window {self.window_}"
            )
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return synthesize(
            self.state_.model,
            self.state_.schedule,
            self.stats_,
            primer_clip,
            n_frames,
            rng,
            stochastic=self.stochastic_sampling,
        )
