"""Training: losses (diffusion, positional, contact), schedule mixing, Adam.

The diffusion loss compares normalized features; the positional and contact
losses run forward kinematics on denormalized features (metric units), built
from autodiff ops so gradients flow through the 6D decoding and the kinematic
chains. 6D decoding on the differentiable path uses safe normalization
(epsilon inside the square roots), matching the clamp rule for model outputs.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import NormalizationStats
from .motion import CONTACT_CHANNELS, ROTATION_FEATURES, forward_kinematics
from .network import DenoiserModel, NetConfig, load_model, save_model
from .schedules import VarianceSchedule, build_variance_schedule, monotonic_levels

LOSS_RING_SIZE = 1000
LOG_COLUMNS = ("step", "loss_diff", "loss_pos", "loss_contact", "schedule_kind_fraction")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    window: int
    p_random: float = 2.0 / 3.0
    lambda_diff: float = 1.0
    lambda_pos: float = 1.0
    lambda_contact: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 16
    checkpoint_every: int = 1000
    seed: int = 0
    schedule_kind: str = "linear"
    channels: tuple = (64, 128, 256)
    kernel: int = 3
    emb_dim: int = 32
    groups: int = 8
    use_predicted_contact_labels: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 0.0 <= self.p_random <= 1.0:
            raise ValueError("p_random must lie in [0, 1]")
        if min(self.lambda_diff, self.lambda_pos, self.lambda_contact) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Differentiable kinematics


def sixd_to_matrix_graph(feats, eps=1e-8):
    """Autodiff version of the 6D decoder with safe (jittered) normalization."""
    a1 = feats[..., 0:3]
    a2 = feats[..., 3:6]
    n1 = ad.sqrt(ad.sum_(ad.mul(a1, a1), axis=-1, keepdims=True) + eps * eps)
    b1 = ad.div(a1, n1)
    proj = ad.sum_(ad.mul(b1, a2), axis=-1, keepdims=True)
    u2 = ad.sub(a2, ad.mul(proj, b1))
    n2 = ad.sqrt(ad.sum_(ad.mul(u2, u2), axis=-1, keepdims=True) + eps * eps)
    b2 = ad.div(u2, n2)
    b3 = _cross(b1, b2)
    cols = [ad.reshape(b, b.data.shape + (1,)) for b in (b1, b2, b3)]
    return ad.concatenate(cols, axis=-1)


def _cross(a, b):
    def comp(t, i):
        return t[..., i : i + 1]

    cx = ad.sub(ad.mul(comp(a, 1), comp(b, 2)), ad.mul(comp(a, 2), comp(b, 1)))
    cy = ad.sub(ad.mul(comp(a, 2), comp(b, 0)), ad.mul(comp(a, 0), comp(b, 2)))
    cz = ad.sub(ad.mul(comp(a, 0), comp(b, 1)), ad.mul(comp(a, 1), comp(b, 0)))
    return ad.concatenate([cx, cy, cz], axis=-1)


def fk_graph(skeleton, features):
    """Joint positions (B, K, J, 3) from a denormalized feature Tensor."""
    j = skeleton.num_joints
    b, k, _ = features.data.shape
    dtype = features.dtype
    rot = ad.reshape(
        features[:, :, 3 : 3 + ROTATION_FEATURES * j], (b, k, j, ROTATION_FEATURES)
    )
    mats = sixd_to_matrix_graph(rot)  # (B, K, J, 3, 3)
    root = ad.concatenate(
        [features[:, :, 0:1], features[:, :, 2:3], features[:, :, 1:2]], axis=-1
    )  # (x, y, z) from (o_xz.x, o_y, o_xz.y)

    rots = [mats[:, :, 0]]
    positions = [root]
    for i in range(1, j):
        p = skeleton.parents[i]
        offset = ad.Tensor(skeleton.offsets[i].reshape(3, 1).astype(dtype))
        disp = ad.reshape(ad.matmul(rots[p], offset), (b, k, 3))
        positions.append(ad.add(positions[p], disp))
        rots.append(ad.matmul(rots[p], mats[:, :, i]))
    stacked = [ad.reshape(t, (b, k, 1, 3)) for t in positions]
    return ad.concatenate(stacked, axis=2)


# ---------------------------------------------------------------------------
# Losses


def loss_diffusion(pred, target):
    """Mean squared error over every frame and channel."""
    target = target if isinstance(target, ad.Tensor) else ad.Tensor(np.asarray(target))
    diff = ad.sub(pred, target)
    return ad.mean(ad.mul(diff, diff))


def loss_positional(pred_denorm, target_denorm, skeleton):
    """Squared FK position error, averaged by 1/(K*J) per clip (and over batch)."""
    target = (
        target_denorm
        if isinstance(target_denorm, ad.Tensor)
        else ad.Tensor(np.asarray(target_denorm))
    )
    pos_pred = fk_graph(skeleton, pred_denorm)
    b, k, j, _ = pos_pred.data.shape
    pos_target = _fk_constant(skeleton, target.data)
    diff = ad.sub(pos_pred, ad.Tensor(pos_target))
    return ad.mul(ad.sum_(ad.mul(diff, diff)), 1.0 / (b * k * j))


def _fk_constant(skeleton, features):
    j = skeleton.num_joints
    b, k, _ = features.shape
    rot = features[:, :, 3 : 3 + ROTATION_FEATURES * j].reshape(b, k, j, ROTATION_FEATURES)
    return forward_kinematics(
        skeleton, rot, features[:, :, 0:2], features[:, :, 2], clamp=True
    ).astype(features.dtype)


def contact_gate(x):
    """The sharp sigmoid s(x) = 1 / (1 + exp(-12 (x - 0.5)))."""
    if isinstance(x, ad.Tensor):
        return ad.sigmoid(ad.mul(ad.sub(x, 0.5), 12.0))
    return 1.0 / (1.0 + np.exp(-12.0 * (np.asarray(x) - 0.5)))


def loss_contact(pred_denorm, skeleton, labels=None):
    """Penalize foot velocity gated by contact labels.

    ``labels`` defaults to the model's own predicted contact channels
    (self-consistency); pass ground-truth labels to gate on dataset contacts
    instead.
    """
    b, k, f = pred_denorm.data.shape
    pos = fk_graph(skeleton, pred_denorm)
    feet = ad.concatenate(
        [pos[:, :, i : i + 1, :] for i in skeleton.foot_joint_indices], axis=2
    )  # (B, K, 4, 3)
    vel = ad.sub(feet[:, 1:], feet[:, :-1])
    speed_sq = ad.sum_(ad.mul(vel, vel), axis=-1)  # (B, K-1, 4)
    if labels is None:
        lab = pred_denorm[:, : k - 1, f - CONTACT_CHANNELS :]
        gate = contact_gate(lab)
    else:
        labels = np.asarray(labels, dtype=pred_denorm.dtype.type)
        gate = ad.Tensor(contact_gate(labels[:, : k - 1]))
    return ad.mul(ad.sum_(ad.mul(speed_sq, gate)), 1.0 / (b * k * CONTACT_CHANNELS))


# ---------------------------------------------------------------------------
# Schedule mixing


def draw_level_batch(rng, batch_size, window, T, p_random):
    """Per-sample level vectors: random schedule with probability ``p_random``,
    monotonic staircase otherwise. Returns (levels (B, K), random_mask (B,))."""
    random_mask = rng.random(batch_size) < p_random
    levels = rng.integers(0, T + 1, size=(batch_size, window))
    mono = monotonic_levels(window, T if T == window else None)
    levels[~random_mask] = mono
    return levels, random_mask


# ---------------------------------------------------------------------------
# Optimizer and train state


@dataclass
class TrainState:
    config: TrainConfig
    model: DenoiserModel
    schedule: VarianceSchedule
    stats: NormalizationStats
    skeleton: object
    fps: float
    rng: np.random.Generator
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    loss_ring: np.ndarray = None

    def __post_init__(self):
        if self.loss_ring is None:
            self.loss_ring = np.full(LOSS_RING_SIZE, np.nan)
        for name, p in self.model.params.items():
            self.adam_m.setdefault(name, np.zeros_like(p.data))
            self.adam_v.setdefault(name, np.zeros_like(p.data))

    @property
    def smoothed_loss(self):
        vals = self.loss_ring[~np.isnan(self.loss_ring)]
        return float(vals.mean()) if vals.size else float("nan")


def init_train_state(config, stats, skeleton, fps, dtype=np.float32):
    feature_width = skeleton.feature_width
    net_config = NetConfig(
        in_channels=feature_width,
        window=config.window,
        channels=config.channels,
        kernel=config.kernel,
        emb_dim=config.emb_dim,
        groups=config.groups,
    )
    model = DenoiserModel.initialize(net_config, seed=config.seed, dtype=dtype)
    schedule = build_variance_schedule(config.schedule_kind, config.window)
    rng = np.random.default_rng(config.seed)
    return TrainState(config, model, schedule, stats, skeleton, fps, rng)


def adam_update(state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    t = state.step  # caller bumps step before the update
    # Bias-corrected step size; eps is rescaled to match the v_hat form.
    alpha = lr * np.sqrt(1.0 - beta2**t) / (1.0 - beta1**t)
    eps_hat = eps * np.sqrt(1.0 - beta2**t)
    for name, p in state.model.params.items():
        g = p.grad
        if g is None:
            continue
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        denom = np.sqrt(v)
        denom += eps_hat
        np.divide(m, denom, out=denom)
        denom *= alpha
        p.data -= denom


def train_step(state, batch, gt_labels=None):
    """One optimization step on a batch of clean normalized windows (B, K, F).

    Returns the loss breakdown dict. Raises :class:`TrainingDivergedError`
    when the total loss is not finite.
    """
    cfg = state.config
    schedule = state.schedule
    batch = np.asarray(batch)
    b, k, f = batch.shape
    dtype = state.model.params["stem.w"].data.dtype

    levels, random_mask = draw_level_batch(state.rng, b, k, schedule.T, cfg.p_random)
    noise = state.rng.standard_normal((b, k, f), dtype=dtype)
    ab = schedule.alpha_bars[levels][..., None].astype(dtype)
    noisy = np.sqrt(ab) * batch.astype(dtype) + np.sqrt(1.0 - ab) * noise

    pred = state.model.forward(ad.Tensor(noisy), levels)
    target = ad.Tensor(batch.astype(dtype))
    l_diff = loss_diffusion(pred, target)

    mean_t = ad.Tensor(state.stats.mean.astype(dtype))
    std_t = ad.Tensor(state.stats.std.astype(dtype))
    pred_denorm = ad.add(ad.mul(pred, std_t), mean_t)
    target_denorm = state.stats.denormalize(batch).astype(dtype)

    terms = {"loss_diff": l_diff}
    total = ad.mul(l_diff, cfg.lambda_diff)
    if cfg.lambda_pos > 0:
        l_pos = loss_positional(pred_denorm, target_denorm, state.skeleton)
        total = ad.add(total, ad.mul(l_pos, cfg.lambda_pos))
        terms["loss_pos"] = l_pos
    if cfg.lambda_contact > 0:
        labels = None if cfg.use_predicted_contact_labels else gt_labels
        l_contact = loss_contact(pred_denorm, state.skeleton, labels=labels)
        total = ad.add(total, ad.mul(l_contact, cfg.lambda_contact))
        terms["loss_contact"] = l_contact

    breakdown = {name: t.item() for name, t in terms.items()}
    breakdown.setdefault("loss_pos", 0.0)
    breakdown.setdefault("loss_contact", 0.0)
    breakdown["schedule_kind_fraction"] = float(random_mask.mean())
    total_value = total.item()
    if not np.isfinite(total_value):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step + 1} "
            f"(seed {cfg.seed}, random-schedule samples {int(random_mask.sum())}/{b}, "
            f"breakdown {breakdown})"
        )

    state.model.zero_grads()
    total.backward()
    state.step += 1
    adam_update(state, cfg.learning_rate)
    state.loss_ring[(state.step - 1) % LOSS_RING_SIZE] = breakdown["loss_diff"]
    return breakdown


def train(state, windows, log_path=None, checkpoint_path=None, gt_labels=None, progress=None):
    """Run the loop until ``config.total_steps``.

    ``windows`` is an (N, K, F) array of normalized clean windows. Batches are
    sampled with replacement from the state's RNG, so a restored state
    reproduces the exact remaining trajectory.
    """
    cfg = state.config
    windows = np.asarray(windows)
    n = windows.shape[0]
    log_file = None
    writer = None
    if log_path is not None:
        new_file = state.step == 0
        log_file = open(log_path, "a" if not new_file else "w", newline="")
        writer = csv.writer(log_file)
        if new_file:
            writer.writerow(LOG_COLUMNS)
    try:
        while state.step < cfg.total_steps:
            idx = state.rng.integers(0, n, size=cfg.batch_size)
            batch = windows[idx]
            labels = gt_labels[idx] if gt_labels is not None else None
            breakdown = train_step(state, batch, gt_labels=labels)
            if writer is not None:
                writer.writerow(
                    [
                        state.step,
                        repr(breakdown["loss_diff"]),
                        repr(breakdown["loss_pos"]),
                        repr(breakdown["loss_contact"]),
                        repr(breakdown["schedule_kind_fraction"]),
                    ]
                )
            if checkpoint_path and state.step % cfg.checkpoint_every == 0:
                save_train_state(checkpoint_path, state)
            if progress is not None:
                progress(state.step, breakdown)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path:
        save_train_state(checkpoint_path, state)
    return state


# ---------------------------------------------------------------------------
# Checkpointing


def save_train_state(path, state):
    extra_meta = {
        "train": {
            "step": state.step,
            "rng_state": state.rng.bit_generator.state,
            "config": state.config.to_dict(),
        }
    }
    extra_arrays = {"loss_ring": state.loss_ring}
    for name, arr in state.adam_m.items():
        extra_arrays[f"opt_m/{name}"] = arr
    for name, arr in state.adam_v.items():
        extra_arrays[f"opt_v/{name}"] = arr
    save_model(
        path,
        state.model,
        {"kind": state.config.schedule_kind, "T": state.schedule.T},
        state.stats,
        state.skeleton,
        state.fps,
        extra_meta=extra_meta,
        extra_arrays=extra_arrays,
    )


def load_train_state(path):
    from .motion import Skeleton

    model, meta, extras = load_model(path)
    if "train" not in meta:
        raise ValueError(f"{path} holds no training state (inference-only checkpoint)")
    train_meta = meta["train"]
    config = TrainConfig.from_dict(train_meta["config"])
    schedule = build_variance_schedule(meta["schedule"]["kind"], meta["schedule"]["T"])
    stats = NormalizationStats.from_dict(meta["normalization"])
    skeleton = Skeleton.from_dict(meta["skeleton"])
    rng = np.random.default_rng()
    rng.bit_generator.state = train_meta["rng_state"]
    state = TrainState(
        config,
        model,
        schedule,
        stats,
        skeleton,
        meta["fps"],
        rng,
        step=train_meta["step"],
        adam_m={k[len("opt_m/") :]: v.copy() for k, v in extras.items() if k.startswith("opt_m/")},
        adam_v={k[len("opt_v/") :]: v.copy() for k, v in extras.items() if k.startswith("opt_v/")},
        loss_ring=extras["loss_ring"].copy(),
    )
    return state
