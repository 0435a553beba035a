"""Temporal U-Net denoiser with per-frame noise-level conditioning.

The network maps a noisy (K, F) motion window plus a length-K integer noise
level vector to a prediction of the clean window. 1D convolutions stride over
the temporal axis, a self-attention block at the bottleneck provides global
context, and skip connections bridge each resolution. Noise levels are
embedded sinusoidally per frame and injected into every residual block, with
the level vector decimated alongside the temporal axis, so conditioning stays
frame-aligned at every resolution.

Contact channels (the last four) pass through a sigmoid head; all other
channels are unbounded.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .motion import CONTACT_CHANNELS

CHECKPOINT_MAGIC = "MBUF-CKPT"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    window: int
    channels: tuple = (64, 128, 256)
    kernel: int = 3
    emb_dim: int = 32
    groups: int = 8
    levels_max: int = None  # highest valid noise level (defaults to window)
    zero_init_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels_max is None:
            object.__setattr__(self, "levels_max", self.window)
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        divisor = 2 ** (len(self.channels) - 1)
        if self.window % divisor != 0:
            raise ValueError(
                f"window {self.window} must be divisible by {divisor} "
                f"({len(self.channels)} resolution levels)"
            )
        for c in self.channels:
            if c % self.groups != 0:
                raise ValueError(f"channel width {c} not divisible by groups={self.groups}")

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "window": self.window,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "emb_dim": self.emb_dim,
            "groups": self.groups,
            "levels_max": self.levels_max,
            "zero_init_head": self.zero_init_head,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def sinusoidal_embedding(levels, dim):
    """Position-independent sinusoidal features of integer noise levels."""
    levels = np.asarray(levels, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = levels[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class DenoiserModel:
    """Parameter container plus the forward pass.

    Parameters live in ``self.params`` as named autodiff tensors with
    ``requires_grad=True``; the forward pass rebuilds the graph each call, so
    two calls with identical inputs produce bit-identical outputs.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params

    # construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        shapes = cls._parameter_shapes(config)
        params = {}
        for name, shape in shapes.items():
            params[name] = ad.Tensor(
                _init_array(name, shape, rng, config).astype(dtype), requires_grad=True
            )
        return cls(config, params)

    @staticmethod
    def _parameter_shapes(config):
        c = config.channels
        k = config.kernel
        de = config.emb_dim * 2
        shapes = {}

        def conv(name, cin, cout, kernel=k):
            shapes[f"{name}.w"] = (cout, cin, kernel)
            shapes[f"{name}.b"] = (cout,)

        def norm(name, ch):
            shapes[f"{name}.g"] = (ch,)
            shapes[f"{name}.beta"] = (ch,)

        def lin(name, cin, cout):
            shapes[f"{name}.w"] = (cin, cout)
            shapes[f"{name}.b"] = (cout,)

        def res(name, cin, cout):
            norm(f"{name}.norm1", cin)
            conv(f"{name}.conv1", cin, cout)
            lin(f"{name}.emb", de, cout)
            norm(f"{name}.norm2", cout)
            conv(f"{name}.conv2", cout, cout)
            if cin != cout:
                conv(f"{name}.skip", cin, cout, kernel=1)

        lin("emb.l1", config.emb_dim, de)
        lin("emb.l2", de, de)
        conv("stem", config.in_channels, c[0])
        for i in range(len(c)):
            res(f"down{i}", c[i], c[i])
            if i < len(c) - 1:
                conv(f"pool{i}", c[i], c[i + 1])
        res("mid.res1", c[-1], c[-1])
        norm("mid.attn.norm", c[-1])
        lin("mid.attn.q", c[-1], c[-1])
        lin("mid.attn.k", c[-1], c[-1])
        lin("mid.attn.v", c[-1], c[-1])
        lin("mid.attn.proj", c[-1], c[-1])
        res("mid.res2", c[-1], c[-1])
        for i in reversed(range(len(c) - 1)):
            conv(f"unpool{i}", c[i + 1], c[i])
            res(f"up{i}", 2 * c[i], c[i])
        norm("head.norm", c[0])
        conv("head", c[0], config.in_channels)
        return shapes

    # forward ------------------------------------------------------------

    def forward(self, frames, levels):
        """Predict the clean window.

        ``frames`` is (K, F) or (B, K, F); ``levels`` matches with shape (K,)
        or (B, K). Returns a Tensor of the input shape.
        """
        dtype = self.params["stem.w"].dtype
        if not isinstance(frames, ad.Tensor):
            frames = ad.Tensor(np.asarray(frames, dtype=dtype))
        x = frames
        levels = np.asarray(levels)
        single = x.data.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.data.shape)
            levels = levels[None]

        cfg = self.config
        b, k, f = x.data.shape
        if k != cfg.window or f != cfg.in_channels:
            raise ValueError(
                f"input shape {(k, f)} does not match model window "
                f"({cfg.window}, {cfg.in_channels})"
            )
        if levels.shape != (b, k):
            raise ValueError(f"levels shape {levels.shape} != {(b, k)}")
        if levels.min() < 0 or levels.max() > cfg.levels_max:
            raise ValueError(f"levels must lie in 0..{cfg.levels_max}")

        p = self.params
        n_res = len(cfg.channels)
        embs = []
        for i in range(n_res):
            sin = sinusoidal_embedding(levels[:, :: 2**i], cfg.emb_dim).astype(dtype)
            e = ad.linear(ad.Tensor(sin), p["emb.l1.w"], p["emb.l1.b"])
            e = ad.silu(e)
            e = ad.linear(e, p["emb.l2.w"], p["emb.l2.b"])
            embs.append(e)  # (B, K/2^i, 2*emb_dim)

        h = ad.transpose(x, (0, 2, 1))  # (B, F, K)
        h = self._conv("stem", h)
        skips = []
        for i in range(n_res):
            h = self._res(f"down{i}", h, embs[i])
            skips.append(h)
            if i < n_res - 1:
                h = self._conv(f"pool{i}", h, stride=2)
        h = self._res("mid.res1", h, embs[-1])
        h = self._attention("mid.attn", h)
        h = self._res("mid.res2", h, embs[-1])
        for i in reversed(range(n_res - 1)):
            h = ad.upsample_nearest(h, 2)
            h = self._conv(f"unpool{i}", h)
            h = ad.concatenate([h, skips[i]], axis=1)
            h = self._res(f"up{i}", h, embs[i])
        h = self._norm("head.norm", h)
        h = ad.silu(h)
        h = self._conv("head", h)
        out = ad.transpose(h, (0, 2, 1))  # (B, K, F)

        motion = out[:, :, : f - CONTACT_CHANNELS]
        contacts = ad.sigmoid(out[:, :, f - CONTACT_CHANNELS :])
        out = ad.concatenate([motion, contacts], axis=2)
        if not np.all(np.isfinite(out.data)):
            raise NumericalError("denoiser forward produced non-finite values")
        if single:
            out = ad.reshape(out, (k, f))
        return out

    def predict_clean(self, frames, levels):
        """Graph-free forward pass returning a plain ndarray."""
        with ad.no_grad():
            return self.forward(frames, levels).data

    # blocks ---------------------------------------------------------------

    def _conv(self, name, h, stride=1):
        p = self.params
        pad = p[f"{name}.w"].data.shape[-1] // 2
        return ad.conv1d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=pad)

    def _norm(self, name, h):
        p = self.params
        return ad.group_norm(h, p[f"{name}.g"], p[f"{name}.beta"], self.config.groups)

    def _res(self, name, h, emb):
        p = self.params
        cin = h.data.shape[1]
        cout = p[f"{name}.conv1.w"].data.shape[0]
        r = self._norm(f"{name}.norm1", h)
        r = ad.silu(r)
        r = self._conv(f"{name}.conv1", r)
        e = ad.linear(emb, p[f"{name}.emb.w"], p[f"{name}.emb.b"])  # (B, L, cout)
        r = ad.add(r, ad.transpose(e, (0, 2, 1)))
        r = self._norm(f"{name}.norm2", r)
        r = ad.silu(r)
        r = self._conv(f"{name}.conv2", r)
        skip = h if cin == cout else self._conv(f"{name}.skip", h)
        return ad.add(r, skip)

    def _attention(self, name, h):
        p = self.params
        b, c, l = h.data.shape
        n = self._norm(f"{name}.norm", h)
        t = ad.transpose(n, (0, 2, 1))  # (B, L, C)
        q = ad.linear(t, p[f"{name}.q.w"], p[f"{name}.q.b"])
        k = ad.linear(t, p[f"{name}.k.w"], p[f"{name}.k.b"])
        v = ad.linear(t, p[f"{name}.v.w"], p[f"{name}.v.b"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c))
        attn = ad.softmax(scores, axis=-1)
        o = ad.matmul(attn, v)
        o = ad.linear(o, p[f"{name}.proj.w"], p[f"{name}.proj.b"])
        return ad.add(h, ad.transpose(o, (0, 2, 1)))

    # utilities --------------------------------------------------------------

    def named_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        """Copy of the model with parameters cast to ``dtype``."""
        params = {
            name: ad.Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.params.items()
        }
        return DenoiserModel(self.config, params)


def _init_array(name, shape, rng, config):
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".b") or name.endswith(".beta"):
        return np.zeros(shape)
    if name == "head.w" and config.zero_init_head:
        return np.zeros(shape)
    fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 else int(np.prod(shape[1:]))
    return rng.standard_normal(shape) / np.sqrt(fan_in)


# ---------------------------------------------------------------------------
# Checkpoint container


def write_checkpoint(path, meta, arrays):
    """Atomically write a named-tensor container with a JSON meta header."""
    payload = dict(meta)
    payload["magic"] = CHECKPOINT_MAGIC
    payload["version"] = CHECKPOINT_VERSION
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(payload)), **arrays)
    os.replace(tmp, path)


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('version')} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        arrays = {k: data[k] for k in data.files if k != "meta"}
    return meta, arrays


def save_model(path, model, schedule_meta, stats, skeleton, fps, extra_meta=None, extra_arrays=None):
    meta = {
        "net_config": model.config.to_dict(),
        "schedule": schedule_meta,
        "normalization": stats.to_dict(),
        "skeleton": skeleton.to_dict(),
        "fps": fps,
        "dtype": str(next(iter(model.params.values())).dtype),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{k}": v for k, v in model.named_arrays().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_checkpoint(path, meta, arrays)


def load_model(path):
    """Returns (model, meta, extra_arrays); meta keeps schedule/stats/skeleton."""
    meta, arrays = read_checkpoint(path)
    config = NetConfig.from_dict(meta["net_config"])
    params = {}
    extras = {}
    for key, value in arrays.items():
        if key.startswith("param/"):
            params[key[len("param/") :]] = ad.Tensor(value, requires_grad=True)
        else:
            extras[key] = value
    model = DenoiserModel(config, params)
    return model, meta, extras
