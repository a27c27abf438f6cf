"""Command-line entry point: gen-data | train | infer | eval | viz.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numeric abort,
5 checkpoint mismatch, 6 results schema. The config file path for `train`
may also come from the PROPSEG_CONFIG environment variable; individual
config keys override via PROPSEG_<KEY>.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DatasetError,
    ResultsSchemaError,
    TrainingDiverged,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propseg",
        description="Online video instance segmentation by query-proposal propagation.",
    )
    parser.add_argument("--jobs", type=int, default=1,
                        help="torch thread count (default 1 for determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=4)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--size", default="64x64", help="HxW, e.g. 64x64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--birth-rate", type=float, default=0.0)
    g.add_argument("--death-rate", type=float, default=0.0)
    g.add_argument("--cross-rate", type=float, default=0.0)
    g.add_argument("--max-instances", type=int, default=3)
    g.add_argument("--split", default="train")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None, help="flat key=value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--box-only", action="store_true")

    i = sub.add_parser("infer", help="run online inference over a dataset")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True, help="results file to write")
    i.add_argument("--lite", type=int, default=1, metavar="K",
                   help="key-frame interval (1 = full model)")
    i.add_argument("--threshold", type=float, default=0.3)
    i.add_argument("--resize-short", type=int, default=0,
                   help="resize frames so the shorter side matches this")

    e = sub.add_parser("eval", help="score a results file against a dataset")
    e.add_argument("--results", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("mask", "box"), default=None,
                   help="defaults to the mode recorded in the results file")

    v = sub.add_parser("viz", help="render overlays and plots")
    v.add_argument("--results", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--metrics", default=None, help="metrics JSONL to plot")
    return parser


def _parse_size(text: str):
    from .boxes import FrameSize

    try:
        h, w = (int(p) for p in text.lower().split("x"))
        return FrameSize(h, w)
    except ValueError as e:
        raise ConfigError(f"--size must be HxW, got {text!r}") from e


def _cmd_gen_data(args) -> int:
    from .synth import EventRates, generate_video, make_manifest, write_dataset

    if args.frames < 1:
        raise ConfigError("--frames must be >= 1")
    if args.videos < 1:
        raise ConfigError("--videos must be >= 1")
    size = _parse_size(args.size)
    rates = EventRates(birth=args.birth_rate, death=args.death_rate,
                       cross=args.cross_rate)
    videos = [
        generate_video(args.frames, size, args.max_instances, rates,
                       seed=args.seed + i, video_id=i, name=f"video_{i:04d}")
        for i in range(args.videos)
    ]
    manifest = make_manifest(videos, seed=args.seed, split=args.split)
    write_dataset(videos, manifest, args.out)
    tracks = sum(len(v.tracks) for v in videos)
    print(f"wrote {len(videos)} videos ({args.frames} frames each, "
          f"{tracks} tracks) to {args.out} [seed {args.seed}, split {args.split}]")
    return 0


def _cmd_train(args) -> int:
    from .engine import load_train_config, train
    from .synth import read_dataset

    config_path = args.config or os.environ.get("PROPSEG_CONFIG") or None
    overrides = {"box_only": "true"} if args.box_only else None
    config = load_train_config(config_path, overrides=overrides)
    videos, _ = read_dataset(args.data)
    artifacts = train(config, videos, args.out)
    last = artifacts.records[-1] if artifacts.records else {}
    print(f"trained {len(artifacts.records)} iterations; "
          f"final loss {last.get('loss', float('nan')):.4f}; "
          f"metrics at {artifacts.metrics_path}; "
          f"checkpoints: {', '.join(str(c) for c in artifacts.checkpoints)}")
    return 0


def _cmd_infer(args) -> int:
    from .engine import LiteSchedule, infer_video, load_checkpoint
    from .evaluate import write_results
    from .synth import read_dataset

    model, _ = load_checkpoint(args.checkpoint)
    videos, manifest = read_dataset(args.data)
    if model.config.num_classes != len(manifest.categories):
        raise CheckpointMismatchError(
            f"checkpoint predicts {model.config.num_classes} classes but the "
            f"dataset has {len(manifest.categories)} categories"
        )
    schedule = LiteSchedule(interval=args.lite,
                            key_stages=model.config.num_stages,
                            non_key_stages=1)
    all_results = []
    for video in videos:
        results, stats = infer_video(
            model, video.frames, schedule, args.threshold,
            video_id=video.video_id,
            resize_short=args.resize_short or None,
        )
        all_results.extend(results)
        print(f"{video.name}: {stats.frames} frames, {stats.key_frames} key, "
              f"{stats.stage_executions} stage executions, "
              f"{stats.wall_time:.3f}s ({len(results)} tracks)")
    mode = "mask" if model.config.mask_on else "box"
    write_results(all_results, args.out, mode=mode)
    print(f"wrote {len(all_results)} tracks to {args.out}")
    return 0


def _gt_and_names(data_dir):
    from .evaluate import gt_tracks_from_video
    from .synth import read_dataset

    videos, manifest = read_dataset(data_dir)
    gts = [t for v in videos for t in gt_tracks_from_video(v)]
    return videos, gts, tuple(manifest.categories)


def _cmd_eval(args) -> int:
    from .evaluate import read_results, video_ap

    results, file_mode = read_results(args.results)
    mode = args.mode or file_mode
    if mode == "mask":
        for i, r in enumerate(results):
            if any(tf.mask is None for tf in r.frames.values()):
                raise ResultsSchemaError(
                    f"mask-mode evaluation but track record #{i} has frames "
                    "without masks (box-only results?)"
                )
    _, gts, names = _gt_and_names(args.data)
    report = video_ap(results, gts, mode=mode, category_names=names)
    print(report.table())
    report_path = Path(args.results).with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_json(), indent=1))
    print(f"report written to {report_path}")
    return 0


def _cmd_viz(args) -> int:
    from .evaluate import read_results
    from .viz import plot_metrics, render_overlays

    results, _ = read_results(args.results)
    videos, _, _ = _gt_and_names(args.data)
    out = Path(args.out)
    total = 0
    for video in videos:
        paths = render_overlays(video, results, out)
        total += len(paths)
    print(f"wrote {total} overlay frames to {out}")
    if args.metrics:
        plot_path = out / "loss.png"
        plot_metrics(args.metrics, plot_path)
        print(f"wrote {plot_path}")
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "viz": _cmd_viz,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    import torch

    torch.set_num_threads(max(args.jobs, 1))
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except CheckpointMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except ResultsSchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 6
    except (DatasetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
