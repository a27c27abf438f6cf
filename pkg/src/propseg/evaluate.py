"""Video-level AP/AR over instance tracks, plus association diagnostics.

A predicted track is a true positive at threshold t when its whole-sequence
IoU against a ground-truth track reaches t; matching is greedy in confidence
order (ties keep insertion order), precision is integrated with the standard
101-point interpolation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box, box_iou
from .errors import ResultsSchemaError
from .masks import mask_intersection_union, mask_iou, rle_decode, rle_encode
from .synth import SyntheticVideo

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

RESULTS_FORMAT_VERSION = 1


@dataclass
class TrackFrame:
    box: Box
    mask: np.ndarray | None = None  # bool (H, W)


@dataclass
class VideoInstanceResult:
    """One predicted track: category, confidence, per-frame observations."""

    video_id: int
    track_id: int
    category_id: int
    confidence: float
    frames: dict[int, TrackFrame] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError("track confidence must be finite")


@dataclass
class GtTrack:
    video_id: int
    instance_id: int
    category_id: int
    frames: dict[int, TrackFrame] = field(default_factory=dict)


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_category: dict[str, float] = field(default_factory=dict)
    mode: str = "mask"

    def rows(self) -> list[tuple[str, float]]:
        base = [("AP", self.ap), ("AP50", self.ap50), ("AP75", self.ap75),
                ("AR1", self.ar1), ("AR10", self.ar10)]
        base.extend((f"AP[{name}]", v) for name, v in sorted(self.per_category.items()))
        return base

    def table(self) -> str:
        lines = [f"{'metric':<16}{'value':>8}"]
        lines += [f"{name:<16}{value:>8.3f}" for name, value in self.rows()]
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "ar1": self.ar1, "ar10": self.ar10,
            "per_category": self.per_category,
        }


def gt_tracks_from_video(video: SyntheticVideo) -> list[GtTrack]:
    """Rebuild per-instance tracks from a video's frame annotations."""
    tracks: dict[int, GtTrack] = {}
    for fidx, anns in enumerate(video.annotations):
        for ann in anns:
            tr = tracks.setdefault(
                ann.instance_id,
                GtTrack(video.video_id, ann.instance_id, ann.category_id),
            )
            tr.frames[fidx] = TrackFrame(box=ann.box, mask=ann.mask)
    return [tracks[k] for k in sorted(tracks)]


def _frame_inter_union(a: TrackFrame | None, b: TrackFrame | None, mode: str) -> tuple[float, float]:
    if mode == "mask":
        if a is None and b is None:
            return 0.0, 0.0
        if a is None:
            return 0.0, float(b.mask.sum())
        if b is None:
            return 0.0, float(a.mask.sum())
        inter, union = mask_intersection_union(a.mask, b.mask)
        return float(inter), float(union)
    # box mode
    def area(f):
        return f.box.area if f is not None else 0.0

    if a is None or b is None:
        return 0.0, area(a) + area(b)
    ix = min(a.box.x2, b.box.x2) - max(a.box.x1, b.box.x1)
    iy = min(a.box.y2, b.box.y2) - max(a.box.y1, b.box.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    return inter, area(a) + area(b) - inter


def sequence_iou(pred: VideoInstanceResult | GtTrack, gt: VideoInstanceResult | GtTrack,
                 mode: str = "mask") -> float:
    """Whole-track IoU: summed per-frame intersections over summed unions,
    over every frame where either track exists (a missing side is empty)."""
    if mode not in ("mask", "box"):
        raise ValueError(f"mode must be 'mask' or 'box', got {mode!r}")
    frames = sorted(set(pred.frames) | set(gt.frames))
    inter_total = 0.0
    union_total = 0.0
    for f in frames:
        inter, union = _frame_inter_union(pred.frames.get(f), gt.frames.get(f), mode)
        inter_total += inter
        union_total += union
    if union_total <= 0.0:
        return 0.0
    return inter_total / union_total


def _interpolated_ap(tp_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP from confidence-ordered TP/FP flags."""
    if num_gt == 0:
        return float("nan")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at or beyond each recall level
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _greedy_match(preds: list[VideoInstanceResult], gts: list[GtTrack],
                  threshold: float, iou_cache: dict) -> list[bool]:
    """Confidence-ordered greedy matching; returns a TP flag per prediction."""
    taken: set[tuple[int, int]] = set()
    flags = []
    for p_idx, pred in enumerate(preds):
        best, best_key = 0.0, None
        for gt in gts:
            if gt.video_id != pred.video_id:
                continue
            key = (gt.video_id, gt.instance_id)
            if key in taken:
                continue
            iou = iou_cache[(p_idx, key)]
            if iou > best:
                best, best_key = iou, key
        if best_key is not None and best >= threshold:
            taken.add(best_key)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def video_ap(results: list[VideoInstanceResult], gt_tracks: list[GtTrack],
             mode: str = "mask", category_names: tuple[str, ...] | None = None,
             max_dets: tuple[int, int] = (1, 10)) -> EvalReport:
    """AP averaged over IoU thresholds 0.50:0.05:0.95 and categories, plus
    AR at 1 and 10 predictions per video. Categories without ground truth
    are excluded from the means (and logged if they carry predictions)."""
    categories = sorted({g.category_id for g in gt_tracks})
    pred_cats = {r.category_id for r in results}
    for c in sorted(pred_cats - set(categories)):
        logger.warning("category %s has predictions but no ground truth; excluded", c)
    ap_per_cat: dict[int, np.ndarray] = {}
    ar_per_cat: dict[int, dict[int, float]] = {}
    for cat in categories:
        cat_gts = [g for g in gt_tracks if g.category_id == cat]
        cat_preds = [r for r in results if r.category_id == cat]
        # stable sort on -confidence keeps insertion order for ties
        order = np.argsort([-r.confidence for r in cat_preds], kind="stable")
        cat_preds = [cat_preds[i] for i in order]
        iou_cache = {
            (p_idx, (g.video_id, g.instance_id)): sequence_iou(pred, g, mode)
            for p_idx, pred in enumerate(cat_preds)
            for g in cat_gts
            if g.video_id == pred.video_id
        }
        ap_per_cat[cat] = np.array([
            _interpolated_ap(_greedy_match(cat_preds, cat_gts, thr, iou_cache), len(cat_gts))
            for thr in IOU_THRESHOLDS
        ])
        ar_per_cat[cat] = {}
        for n in max_dets:
            kept_idx = []
            per_video_count: dict[int, int] = {}
            for p_idx, pred in enumerate(cat_preds):
                c = per_video_count.get(pred.video_id, 0)
                if c < n:
                    kept_idx.append(p_idx)
                    per_video_count[pred.video_id] = c + 1
            kept = [cat_preds[i] for i in kept_idx]
            sub_cache = {
                (new_i, key): iou_cache[(old_i, key)]
                for new_i, old_i in enumerate(kept_idx)
                for key in [(g.video_id, g.instance_id) for g in cat_gts
                            if g.video_id == kept[new_i].video_id]
            }
            recalls = []
            for thr in IOU_THRESHOLDS:
                flags = _greedy_match(kept, cat_gts, thr, sub_cache)
                recalls.append(sum(flags) / max(len(cat_gts), 1))
            ar_per_cat[cat][n] = float(np.mean(recalls))

    if not categories:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0.0, {}, mode)
    ap_matrix = np.stack([ap_per_cat[c] for c in categories])  # (cats, thr)
    names = category_names or tuple(str(c) for c in categories)
    per_category = {
        (names[c] if c < len(names) else str(c)): float(ap_per_cat[c].mean())
        for c in categories
    }
    thr_index = {round(t, 2): i for i, t in enumerate(IOU_THRESHOLDS)}
    return EvalReport(
        ap=float(ap_matrix.mean()),
        ap50=float(ap_matrix[:, thr_index[0.5]].mean()),
        ap75=float(ap_matrix[:, thr_index[0.75]].mean()),
        ar1=float(np.mean([ar_per_cat[c][max_dets[0]] for c in categories])),
        ar10=float(np.mean([ar_per_cat[c][max_dets[1]] for c in categories])),
        per_category=per_category,
        mode=mode,
    )


def association_accuracy(results: list[VideoInstanceResult], gt_tracks: list[GtTrack],
                         mode: str = "box", iou_threshold: float = 0.5) -> float:
    """1 minus the ID-switch rate over consecutive-frame gt pairs.

    Per frame, a gt matches the reported track with the best IoU >= 0.5; a
    pair counts as correct when both frames match the same track ID.
    Returns 0 when there are no predictions.
    """
    if not results:
        return 0.0
    total = 0
    correct = 0
    for gt in gt_tracks:
        matched: dict[int, int | None] = {}
        for f, gframe in gt.frames.items():
            best_iou, best_id = iou_threshold, None
            for pred in results:
                if pred.video_id != gt.video_id or f not in pred.frames:
                    continue
                pframe = pred.frames[f]
                if mode == "mask" and pframe.mask is not None and gframe.mask is not None:
                    iou = mask_iou(pframe.mask, gframe.mask)
                else:
                    iou = box_iou(pframe.box, gframe.box)
                if iou >= best_iou:
                    best_iou, best_id = iou, pred.track_id
            matched[f] = best_id
        for f in sorted(gt.frames):
            if f + 1 not in gt.frames:
                continue
            total += 1
            if matched[f] is not None and matched[f] == matched[f + 1]:
                correct += 1
    if total == 0:
        return 1.0
    return correct / total


# --- results file ------------------------------------------------------------


def write_results(results: list[VideoInstanceResult], path: str | Path,
                  mode: str = "mask") -> None:
    records = []
    for r in results:
        frames = {}
        for f, tf in sorted(r.frames.items()):
            rec = {"box": list(tf.box.as_tuple())}
            if tf.mask is not None:
                rec["rle"] = rle_encode(tf.mask)
            frames[str(f)] = rec
        records.append(
            {
                "video_id": r.video_id,
                "track_id": r.track_id,
                "category_id": r.category_id,
                "score": r.confidence,
                "frames": frames,
            }
        )
    payload = {"format_version": RESULTS_FORMAT_VERSION, "mode": mode, "tracks": records}
    Path(path).write_text(json.dumps(payload))


def read_results(path: str | Path) -> tuple[list[VideoInstanceResult], str]:
    p = Path(path)
    if not p.exists():
        raise ResultsSchemaError(f"missing results file: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ResultsSchemaError(f"results file {p} is not valid JSON: {e}") from e
    if payload.get("format_version") != RESULTS_FORMAT_VERSION:
        raise ResultsSchemaError(
            f"results format_version {payload.get('format_version')!r} unsupported"
        )
    mode = payload.get("mode", "mask")
    results = []
    for i, rec in enumerate(payload.get("tracks", [])):
        try:
            frames = {}
            for f_s, fr in rec["frames"].items():
                mask = rle_decode(fr["rle"]) if "rle" in fr else None
                frames[int(f_s)] = TrackFrame(box=Box(*fr["box"]), mask=mask)
            results.append(
                VideoInstanceResult(
                    video_id=rec["video_id"],
                    track_id=rec["track_id"],
                    category_id=rec["category_id"],
                    confidence=rec["score"],
                    frames=frames,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ResultsSchemaError(f"bad track record #{i} in {p}: {e}") from e
    return results, mode
