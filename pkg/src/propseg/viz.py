"""Overlay rasters and training/evaluation plots.

Track colors are a deterministic function of the track ID, so an identity
keeps its color on every frame it appears in.
"""

from __future__ import annotations

import colorsys
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .evaluate import EvalReport, VideoInstanceResult
from .synth import SyntheticVideo

_GOLDEN = 0.61803398875


def track_color(track_id: int) -> tuple[int, int, int]:
    """Stable, well-separated palette via golden-ratio hue stepping."""
    hue = (0.12 + track_id * _GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 1.0)
    return (int(255 * r), int(255 * g), int(255 * b))


def overlay_frame(frame: np.ndarray, observations: list[tuple[int, object, np.ndarray | None]],
                  alpha: float = 0.45) -> np.ndarray:
    """Blend per-track masks and draw boxes; observations are
    (track_id, Box, mask|None) triples."""
    canvas = frame.astype(np.float32).copy()
    for track_id, box, mask in observations:
        color = np.array(track_color(track_id), dtype=np.float32)
        if mask is not None:
            m = mask.astype(bool)
            canvas[m] = (1 - alpha) * canvas[m] + alpha * color
    img = Image.fromarray(canvas.clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for track_id, box, _ in observations:
        draw.rectangle([box.x1, box.y1, max(box.x2 - 1, box.x1),
                        max(box.y2 - 1, box.y1)],
                       outline=track_color(track_id), width=1)
    return np.asarray(img)


def render_overlays(video: SyntheticVideo, results: list[VideoInstanceResult],
                    out_dir: str | Path) -> list[Path]:
    """One overlay raster per frame; returns the written paths."""
    out = Path(out_dir) / video.name
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fidx, frame in enumerate(video.frames):
        observations = [
            (r.track_id, r.frames[fidx].box, r.frames[fidx].mask)
            for r in results
            if r.video_id == video.video_id and fidx in r.frames
        ]
        rendered = overlay_frame(frame, observations)
        path = out / f"{fidx:06d}.png"
        Image.fromarray(rendered).save(path)
        paths.append(path)
    return paths


def plot_metrics(metrics_path: str | Path, out_path: str | Path) -> None:
    """Loss curves (total + per-term) from a metrics JSONL file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = [json.loads(line) for line in Path(metrics_path).read_text().splitlines()]
    if not records:
        raise ValueError(f"no records in {metrics_path}")
    iterations = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iterations, [r["loss"] for r in records], label="total", linewidth=1.5)
    for key in sorted(records[0]):
        if key.startswith("loss_"):
            ax.plot(iterations, [r[key] for r in records], label=key[5:], alpha=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_report(report: EvalReport, out_path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report.rows()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar([name for name, _ in rows], [v for _, v in rows], color="#4878b0")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(f"{report.mode}-mode score")
    ax.tick_params(axis="x", rotation=30, labelsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
