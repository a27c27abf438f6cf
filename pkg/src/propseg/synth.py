"""Synthetic moving-shapes videos with exhaustive ground truth.

Shapes (circle / square / triangle) translate with constant velocity,
bounce off frame edges, and are subject to three per-frame events:
birth of a new instance, death of an existing one, and a crossing
(one instance steered into another to force occlusion). Rendering is
binary (no anti-aliasing) so masks are exact; occluded pixels belong
to the topmost instance (lower depth value = nearer the camera).

Dataset layout on disk:

    root/
      manifest.json                     split, seed, categories, video index
      <video_name>/
        000000.png ...                  one lossless raster per frame
        annotations.json                per-instance per-frame box + RLE mask,
                                        plus the generating trajectories
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box, FrameSize
from .errors import ConfigError, DatasetError
from .masks import mask_tight_box, rle_decode, rle_encode

CATEGORY_NAMES = ("circle", "square", "triangle")

# base RGB per category; per-instance brightness jitter on top
_CATEGORY_COLORS = ((205, 65, 60), (60, 200, 70), (70, 95, 220))
_BACKGROUND = (24, 24, 28)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class EventRates:
    """Per-frame probabilities of the three trajectory events."""

    birth: float = 0.0
    death: float = 0.0
    cross: float = 0.0


@dataclass
class TrackPoint:
    """One frame of a trajectory: center, size parameter, depth order."""

    cx: float
    cy: float
    size: float
    depth: int


@dataclass
class ShapeTrack:
    instance_id: int
    category_id: int
    first_frame: int
    last_frame: int  # inclusive
    points: list[TrackPoint] = field(default_factory=list)
    color: tuple[int, int, int] = (255, 255, 255)

    def point_at(self, frame: int) -> TrackPoint:
        return self.points[frame - self.first_frame]

    def lives_on(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame


@dataclass(eq=False)
class FrameAnnotation:
    instance_id: int
    category_id: int
    box: Box
    mask: np.ndarray  # bool (H, W), the visible part only


@dataclass(eq=False)
class SyntheticVideo:
    video_id: int
    name: str
    size: FrameSize
    frames: list[np.ndarray]  # uint8 (H, W, 3)
    annotations: list[list[FrameAnnotation]]  # one list per frame
    tracks: list[ShapeTrack]

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class DatasetManifest:
    seed: int
    split: str
    categories: tuple[str, ...] = CATEGORY_NAMES
    videos: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION


def _raster_shape(category_id: int, cx: float, cy: float, size: float,
                  frame: FrameSize) -> np.ndarray:
    """Exact boolean raster of one shape, evaluated at pixel centers."""
    ys = np.arange(frame.height, dtype=np.float64) + 0.5
    xs = np.arange(frame.width, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if category_id == 0:  # circle of radius `size`
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    if category_id == 1:  # axis-aligned square, half-side `size`
        return (np.abs(xx - cx) <= size) & (np.abs(yy - cy) <= size)
    if category_id == 2:  # upward isoceles triangle
        ax, ay = cx, cy - size
        bx, by = cx - 0.95 * size, cy + 0.75 * size
        dx, dy = cx + 0.95 * size, cy + 0.75 * size
        # half-plane test against each edge (consistent winding)
        def side(px, py, qx, qy):
            return (qx - px) * (yy - py) - (qy - py) * (xx - px)

        s1 = side(ax, ay, bx, by)
        s2 = side(bx, by, dx, dy)
        s3 = side(dx, dy, ax, ay)
        return (s1 <= 0) & (s2 <= 0) & (s3 <= 0)
    raise ConfigError(f"unknown category id {category_id}")


class _Motion:
    """Constant-velocity center motion with wall bounce."""

    def __init__(self, cx, cy, vx, vy, size, frame: FrameSize):
        self.cx, self.cy, self.vx, self.vy = cx, cy, vx, vy
        self.size = size
        # centers may roam half a size past the edge: shapes get truncated
        # by the frame, never vanish entirely
        self.xmin, self.xmax = 0.5 * size, frame.width - 0.5 * size
        self.ymin, self.ymax = 0.5 * size, frame.height - 0.5 * size

    def advance(self):
        self.cx += self.vx
        self.cy += self.vy
        if self.cx < self.xmin or self.cx > self.xmax:
            self.vx = -self.vx
            self.cx = min(max(self.cx, self.xmin), self.xmax)
        if self.cy < self.ymin or self.cy > self.ymax:
            self.vy = -self.vy
            self.cy = min(max(self.cy, self.ymin), self.ymax)


def render_tracks(tracks: list[ShapeTrack], frame_size: FrameSize,
                  num_frames: int, video_id: int = 0,
                  name: str = "video") -> SyntheticVideo:
    """Rasterize trajectories into frames + per-frame ground truth.

    Paint order is deepest first, so an occluded pixel ends up belonging
    to the instance with the smallest depth value. Fully occluded
    instances are skipped in that frame's annotations (no visible pixels,
    hence no tight box).
    """
    frames = []
    annotations: list[list[FrameAnnotation]] = []
    for t in range(num_frames):
        live = [tr for tr in tracks if tr.lives_on(t)]
        live.sort(key=lambda tr: (tr.point_at(t).depth, tr.instance_id), reverse=True)
        canvas = np.empty((frame_size.height, frame_size.width, 3), dtype=np.uint8)
        canvas[:] = _BACKGROUND
        rasters = []
        for tr in live:
            p = tr.point_at(t)
            r = _raster_shape(tr.category_id, p.cx, p.cy, p.size, frame_size)
            canvas[r] = tr.color
            rasters.append((tr, r))
        # visible mask = own raster minus everything painted after (nearer)
        anns = []
        occluders = np.zeros((frame_size.height, frame_size.width), dtype=bool)
        for tr, r in reversed(rasters):
            visible = r & ~occluders
            occluders |= r
            box = mask_tight_box(visible)
            if box is not None:
                anns.append(FrameAnnotation(tr.instance_id, tr.category_id, box, visible))
        anns.sort(key=lambda a: a.instance_id)
        frames.append(canvas)
        annotations.append(anns)
    return SyntheticVideo(video_id, name, frame_size, frames, annotations, tracks)


def generate_video(num_frames: int, frame_size: FrameSize, max_instances: int,
                   event_rates: EventRates, seed: int, *, video_id: int = 0,
                   name: str | None = None, max_speed: float = 1.5,
                   size_range: tuple[float, float] = (0.14, 0.23)) -> SyntheticVideo:
    """Plan trajectories from the seeded RNG, then render them.

    Deterministic given its arguments. Instance 0 spans the whole video
    and renders topmost (depth 0), so at least one track is annotated on
    every frame. size_range is relative to min(height, width).
    """
    if num_frames < 1:
        raise ConfigError(f"num_frames must be >= 1, got {num_frames}")
    if max_instances < 1:
        raise ConfigError(f"max_instances must be >= 1, got {max_instances}")
    short = min(frame_size.height, frame_size.width)
    size_lo, size_hi = size_range[0] * short, size_range[1] * short
    if size_lo < 2.0:
        raise ConfigError(
            f"frame {frame_size.height}x{frame_size.width} too small for "
            f"size range {size_range}: shapes would be under 2px"
        )
    if 2 * size_hi > short:
        raise ConfigError(
            f"shapes of size {size_hi:.1f} do not fit a {short}px frame"
        )
    rng = np.random.default_rng(seed)

    tracks: list[ShapeTrack] = []
    motions: dict[int, _Motion] = {}

    def spawn(first_frame: int) -> ShapeTrack:
        iid = len(tracks)
        cat = int(rng.integers(0, len(CATEGORY_NAMES)))
        size = float(rng.uniform(size_lo, size_hi))
        cx = float(rng.uniform(size, frame_size.width - size))
        cy = float(rng.uniform(size, frame_size.height - size))
        ang = float(rng.uniform(0, 2 * np.pi))
        speed = float(rng.uniform(0.3 * max_speed, max_speed)) if max_speed > 0 else 0.0
        jitter = rng.integers(-45, 46, size=3)
        base = _CATEGORY_COLORS[cat]
        color = tuple(int(np.clip(base[i] + jitter[i], 30, 255)) for i in range(3))
        tr = ShapeTrack(iid, cat, first_frame, num_frames - 1, [], color)
        tracks.append(tr)
        motions[iid] = _Motion(cx, cy, speed * np.cos(ang), speed * np.sin(ang),
                               size, frame_size)
        return tr

    n_initial = int(rng.integers(1, max_instances + 1))
    for _ in range(n_initial):
        spawn(0)

    for t in range(num_frames):
        if t > 0:
            live_ids = [tr.instance_id for tr in tracks if tr.lives_on(t)]
            # death: a random non-anchor live track ends on the previous frame
            if len(live_ids) > 1 and rng.uniform() < event_rates.death:
                victim = int(rng.choice([i for i in live_ids if i != 0]))
                tracks[victim].last_frame = t - 1
                motions.pop(victim)
                live_ids.remove(victim)
            # birth
            if len(live_ids) < max_instances and rng.uniform() < event_rates.birth:
                spawn(t)
                live_ids.append(tracks[-1].instance_id)
            # crossing: steer one instance onto another's projected center
            if len(live_ids) >= 2 and rng.uniform() < event_rates.cross:
                a, b = rng.choice(live_ids, size=2, replace=False)
                horizon = int(rng.integers(4, 9))
                ma, mb = motions[int(a)], motions[int(b)]
                tx = ma.cx + ma.vx * horizon
                ty = ma.cy + ma.vy * horizon
                mb.vx = (tx - mb.cx) / horizon
                mb.vy = (ty - mb.cy) / horizon
        for tr in tracks:
            if not tr.lives_on(t):
                continue
            m = motions[tr.instance_id]
            if t > tr.first_frame:
                m.advance()
            # depth = instance id: earlier instances render nearer the camera
            tr.points.append(TrackPoint(m.cx, m.cy, m.size, tr.instance_id))

    vid_name = name if name is not None else f"video_{video_id:04d}"
    return render_tracks(tracks, frame_size, num_frames, video_id, vid_name)


def make_manifest(videos: list[SyntheticVideo], seed: int, split: str = "train") -> DatasetManifest:
    meta = [
        {
            "id": v.video_id,
            "name": v.name,
            "num_frames": v.num_frames,
            "height": v.size.height,
            "width": v.size.width,
        }
        for v in videos
    ]
    return DatasetManifest(seed=seed, split=split, videos=meta)


def write_dataset(videos: list[SyntheticVideo], manifest: DatasetManifest,
                  directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": manifest.format_version,
        "seed": manifest.seed,
        "split": manifest.split,
        "categories": [{"id": i, "name": n} for i, n in enumerate(manifest.categories)],
        "videos": manifest.videos,
    }
    (root / "manifest.json").write_text(json.dumps(payload, indent=1))
    for video in videos:
        vdir = root / video.name
        vdir.mkdir(exist_ok=True)
        for idx, frame in enumerate(video.frames):
            Image.fromarray(frame).save(vdir / f"{idx:06d}.png")
        instances: dict[int, dict] = {}
        for fidx, anns in enumerate(video.annotations):
            for ann in anns:
                rec = instances.setdefault(
                    ann.instance_id,
                    {"instance_id": ann.instance_id, "category_id": ann.category_id,
                     "frames": {}},
                )
                rec["frames"][str(fidx)] = {
                    "box": list(ann.box.as_tuple()),
                    "rle": rle_encode(ann.mask),
                }
        tracks = [
            {
                "instance_id": tr.instance_id,
                "category_id": tr.category_id,
                "first_frame": tr.first_frame,
                "last_frame": tr.last_frame,
                "color": list(tr.color),
                "points": [[p.cx, p.cy, p.size, p.depth] for p in tr.points],
            }
            for tr in video.tracks
        ]
        ann_payload = {
            "video_id": video.video_id,
            "name": video.name,
            "height": video.size.height,
            "width": video.size.width,
            "instances": [instances[k] for k in sorted(instances)],
            "tracks": tracks,
        }
        (vdir / "annotations.json").write_text(json.dumps(ann_payload))


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt dataset file {path}: {e}") from e


def read_dataset(directory: str | Path) -> tuple[list[SyntheticVideo], DatasetManifest]:
    root = Path(directory)
    mdata = _load_json(root / "manifest.json")
    manifest = DatasetManifest(
        seed=mdata["seed"],
        split=mdata["split"],
        categories=tuple(c["name"] for c in mdata["categories"]),
        videos=mdata["videos"],
        format_version=mdata["format_version"],
    )
    videos = []
    for vmeta in manifest.videos:
        vdir = root / vmeta["name"]
        adata = _load_json(vdir / "annotations.json")
        size = FrameSize(adata["height"], adata["width"])
        frames = []
        for idx in range(vmeta["num_frames"]):
            fpath = vdir / f"{idx:06d}.png"
            if not fpath.exists():
                raise DatasetError(f"missing frame raster: {fpath}")
            frames.append(np.asarray(Image.open(fpath).convert("RGB")))
        annotations: list[list[FrameAnnotation]] = [[] for _ in range(vmeta["num_frames"])]
        for inst in adata["instances"]:
            for fidx_s, rec in inst["frames"].items():
                fidx = int(fidx_s)
                annotations[fidx].append(
                    FrameAnnotation(
                        inst["instance_id"],
                        inst["category_id"],
                        Box(*rec["box"]),
                        rle_decode(rec["rle"]),
                    )
                )
        for anns in annotations:
            anns.sort(key=lambda a: a.instance_id)
        tracks = [
            ShapeTrack(
                tr["instance_id"],
                tr["category_id"],
                tr["first_frame"],
                tr["last_frame"],
                [TrackPoint(*p) for p in tr["points"]],
                tuple(tr["color"]),
            )
            for tr in adata["tracks"]
        ]
        videos.append(
            SyntheticVideo(adata["video_id"], adata["name"], size, frames,
                           annotations, tracks)
        )
    return videos, manifest
