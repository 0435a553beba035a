"""Command-line interface.

Subcommands: ingest, train, generate, guide, trajectory, eval, export-bvh.
All randomness sits behind ``--seed``; validation failures exit 1 with a
message, usage errors exit 2 (argparse).
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    DatasetConfig,
    NormalizationStats,
    downsample,
    encode_clip,
    export_bvh,
    generate_toy_dataset,
    load_dataset,
    make_windows,
    parse_bvh,
    save_dataset,
)
from .metrics import evaluate_clip
from .motion import MotionClip
from .network import load_model
from .sampling import synthesize
from .schedules import build_variance_schedule
from .training import TrainConfig, init_train_state, load_train_state, train


def build_parser():
    parser = argparse.ArgumentParser(
        prog="motionbuffer",
        description="Long-horizon skeletal motion synthesis via buffered denoising",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a training dataset cache")
    p.add_argument("--source-dir", help="directory of BVH files")
    p.add_argument("--toy", action="store_true", help="generate the synthetic gait dataset instead")
    p.add_argument("--clips", type=int, default=24, help="toy dataset: number of clips")
    p.add_argument("--frames", type=int, default=500, help="toy dataset: frames per clip")
    p.add_argument("--source-fps", type=int, default=120)
    p.add_argument("--target-fps", type=int, default=30)
    p.add_argument("--window", type=int, default=500)
    p.add_argument("--stride", type=int, default=100)
    p.add_argument("--scale", type=float, default=1.0, help="BVH unit-to-meter scale")
    p.add_argument("--feet", nargs=4, metavar="JOINT", help="foot joint names (LH LT RH RT)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a denoiser on a dataset cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--config", help="JSON config file (see README for keys)")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-random", type=float, default=2.0 / 3.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--channels", default=None, help="comma-separated widths, e.g. 64,128,256")
    p.add_argument("--lambda-diff", type=float, default=1.0)
    p.add_argument("--lambda-pos", type=float, default=1.0)
    p.add_argument("--lambda-contact", type=float, default=0.1)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--schedule", default="linear", choices=("linear", "cosine"))

    for name, extra in (
        ("generate", "unconditional generation from a primer"),
        ("guide", "generation steered by motion guides"),
        ("trajectory", "generation with a pinned root trajectory"),
    ):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--primer", required=True, help="BVH primer of exactly the model window")
        p.add_argument("--frames", type=int, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output BVH path")
        p.add_argument("--scale", type=float, default=1.0)
        p.add_argument("--deterministic", action="store_true", help="suppress posterior noise")
        p.add_argument("--literal-update", action="store_true",
                       help="shift raw clean predictions re-noised to the destination level")
        if name == "guide":
            p.add_argument("--guides", required=True,
                           help="manifest: lines of 'path, start_frame'")
        if name == "trajectory":
            p.add_argument("--traj", required=True, help="CSV of N rows: dx, dz, height")

    p = sub.add_parser("eval", help="collapse/foot-slide metrics for a BVH clip")
    p.add_argument("--input", required=True)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--feet", nargs=4, metavar="JOINT")
    p.add_argument("--out", help="output prefix for <prefix>.csv and <prefix>.txt")

    p = sub.add_parser("export-bvh", help="export a cached training window as BVH")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    handlers = {
        "ingest": cmd_ingest,
        "train": cmd_train,
        "generate": cmd_generate,
        "guide": cmd_generate,
        "trajectory": cmd_generate,
        "eval": cmd_eval,
        "export-bvh": cmd_export_bvh,
    }
    return handlers[args.command](args)


def cmd_ingest(args):
    config = DatasetConfig(
        source_fps=args.source_fps if not args.toy else args.target_fps,
        target_fps=args.target_fps,
        window_len=args.window,
        stride=args.stride,
        scale=args.scale,
    )
    windows = []
    skeleton = None
    if args.toy:
        clips, _ = generate_toy_dataset(args.seed, args.clips, args.frames, fps=args.target_fps)
        skeleton = clips[0].skeleton
        for i, clip in enumerate(clips):
            windows.extend(make_windows(clip, args.window, args.stride, source_id=f"toy{i}"))
    else:
        if not args.source_dir:
            raise ValueError("ingest needs --source-dir (or --toy)")
        paths = sorted(Path(args.source_dir).glob("*.bvh"))
        if not paths:
            raise ValueError(f"no .bvh files under {args.source_dir}")
        for path in paths:
            skel, raw = parse_bvh(path.read_text(), scale=args.scale, foot_joint_names=args.feet)
            if skeleton is None:
                skeleton = skel
            elif skel.to_dict() != skeleton.to_dict():
                raise ValueError(f"{path.name}: skeleton differs from the first file")
            clip = encode_clip(skel, raw)
            source_fps = round(1.0 / raw.frame_time)
            if source_fps != args.source_fps:
                raise ValueError(
                    f"{path.name}: file is {source_fps} fps, expected --source-fps {args.source_fps}"
                )
            clip = downsample(clip, source_fps, args.target_fps)
            windows.extend(make_windows(clip, args.window, args.stride, source_id=path.stem))
    if not windows:
        raise ValueError(
            f"no windows of length {args.window} available (clips shorter than the window are skipped)"
        )
    stacked = np.stack([w.clip.frames for w in windows])
    stats = NormalizationStats.fit(stacked)
    save_dataset(args.out, windows, stats, skeleton, float(args.target_fps), config=vars(args) | {"command": None})
    print(f"wrote {len(windows)} windows of {args.window} frames to {args.out}")
    return 0


def _train_config_from_args(args, window):
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        schedule_cfg = file_cfg.get("schedule", {})
        if "T" in schedule_cfg and schedule_cfg["T"] != window:
            raise ValueError(
                f"schedule.T={schedule_cfg['T']} must equal the data window K={window}"
            )
        overrides.update(file_cfg.get("train", {}))
        if "kind" in schedule_cfg:
            overrides["schedule_kind"] = schedule_cfg["kind"]
    channels = overrides.pop("channels", None)
    if args.channels:
        channels = [int(c) for c in args.channels.split(",")]
    base = dict(
        total_steps=args.steps,
        window=window,
        p_random=args.p_random,
        lambda_diff=args.lambda_diff,
        lambda_pos=args.lambda_pos,
        lambda_contact=args.lambda_contact,
        learning_rate=args.lr,
        batch_size=args.batch,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
        schedule_kind=args.schedule,
    )
    base.update(overrides)
    if channels is not None:
        base["channels"] = tuple(channels)
    return TrainConfig(**base)


def cmd_train(args):
    windows, stats, skeleton, fps = load_dataset(args.data)
    stacked = np.stack([w.clip.frames for w in windows])
    normalized = stats.normalize(stacked).astype(np.float32)
    if args.resume:
        state = load_train_state(args.resume)
        state.config = TrainConfig.from_dict(
            state.config.to_dict() | {"total_steps": args.steps}
        )
    else:
        config = _train_config_from_args(args, stacked.shape[1])
        state = init_train_state(config, stats, skeleton, fps)
    train(state, normalized, log_path=args.log, checkpoint_path=args.out)
    print(f"trained to step {state.step}; checkpoint at {args.out}")
    return 0


def _load_primer(args, skeleton_ref):
    skel, raw = parse_bvh(Path(args.primer).read_text(), scale=args.scale)
    ref = skeleton_ref.to_dict()
    got = skel.to_dict()
    if got["names"] != ref["names"] or got["parents"] != ref["parents"]:
        raise ValueError("primer skeleton does not match the checkpoint skeleton")
    if np.abs(np.asarray(got["offsets"]) - np.asarray(ref["offsets"])).max() > 1e-4:
        raise ValueError("primer skeleton offsets deviate from the checkpoint skeleton")
    return encode_clip(skeleton_ref, raw)


def cmd_generate(args):
    from .motion import Skeleton

    model, meta, _ = load_model(args.checkpoint)
    skeleton = Skeleton.from_dict(meta["skeleton"])
    stats = NormalizationStats.from_dict(meta["normalization"])
    schedule = build_variance_schedule(meta["schedule"]["kind"], meta["schedule"]["T"])
    primer = _load_primer(args, skeleton)
    window = model.config.window
    if len(primer) != window:
        raise ValueError(
            f"primer has {len(primer)} frames but the checkpoint window is {window}"
        )
    guides = None
    trajectory = None
    if args.command == "guide":
        guides = _load_guides(args.guides, skeleton, window, args.scale)
    elif args.command == "trajectory":
        trajectory = _load_trajectory(args.traj)
    rng = np.random.default_rng(args.seed)
    clip = synthesize(
        model,
        schedule,
        stats,
        primer,
        args.frames,
        rng,
        stochastic=not args.deterministic,
        update="literal" if args.literal_update else "posterior",
        guides=guides,
        trajectory=trajectory,
    )
    export_bvh(clip, args.out)
    print(f"wrote {len(clip)} frames to {args.out}")
    return 0


def _load_guides(manifest_path, skeleton, window, scale):
    guides = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                path, start = (part.strip() for part in line.split(","))
                start = int(start)
            except ValueError:
                raise ValueError(
                    f"{manifest_path}:{line_no}: expected 'path, start_frame'"
                ) from None
            skel, raw = parse_bvh(Path(path).read_text(), scale=scale)
            if skel.to_dict()["names"] != skeleton.to_dict()["names"]:
                raise ValueError(f"{path}: guide skeleton does not match the checkpoint")
            guides.append((encode_clip(skeleton, raw), start))
    if not guides:
        raise ValueError(f"{manifest_path}: no guides listed")
    return guides


def _load_trajectory(path):
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.shape[1] != 3:
        raise ValueError(f"{path}: trajectory CSV must have 3 columns, got {rows.shape[1]}")
    return rows


def cmd_eval(args):
    skel, raw = parse_bvh(Path(args.input).read_text(), scale=args.scale, foot_joint_names=args.feet)
    clip = encode_clip(skel, raw)
    report = evaluate_clip(clip, args.window, args.stride)
    summary = report.summary()
    for key, value in summary.items():
        print(f"{key}: {value}")
    if args.out:
        with open(f"{args.out}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_start", "variance"])
            for s, v in zip(report.window_starts, report.windowed_variance):
                writer.writerow([int(s), repr(float(v))])
        with open(f"{args.out}.txt", "w") as fh:
            for key, value in summary.items():
                fh.write(f"{key}: {value}\n")
        print(f"metrics written to {args.out}.csv and {args.out}.txt")
    return 0


def cmd_export_bvh(args):
    windows, stats, skeleton, fps = load_dataset(args.data)
    if not 0 <= args.index < len(windows):
        raise ValueError(f"--index {args.index} out of range (cache holds {len(windows)})")
    clip = windows[args.index].clip
    export_bvh(MotionClip(np.asarray(clip.frames, dtype=np.float64), skeleton, fps), args.out)
    print(f"wrote window {args.index} ({len(clip)} frames) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
