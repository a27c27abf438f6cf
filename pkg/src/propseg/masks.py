"""Binary mask utilities: run-length coding, IoU, tight boxes.

RLE convention: row-major scan, alternating background/foreground run
lengths, always starting with a background run (which may be 0).
"""

from __future__ import annotations

import numpy as np

from .boxes import Box


def rle_encode(mask: np.ndarray) -> dict:
    """Encode a 2D {0,1} mask as {"size": [h, w], "counts": [...]}."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts: list[int] = []
    if flat.size == 0:
        return {"size": [h, w], "counts": counts}
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    runs = np.diff(np.concatenate(([0], change, [flat.size])))
    if flat[0]:
        counts.append(0)  # leading background run of length 0
    counts.extend(int(r) for r in runs)
    return {"size": [h, w], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    """Decode an RLE dict back to a 2D bool mask."""
    h, w = rle["size"]
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def mask_area(a: np.ndarray) -> int:
    return int(np.asarray(a, dtype=bool).sum())


def mask_intersection_union(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter, union


def mask_tight_box(mask: np.ndarray) -> Box | None:
    """Tight pixel bounding box of the foreground, or None for an empty mask.

    Pixel (r, c) occupies [c, c+1] x [r, r+1], so the box of a single
    foreground pixel at (r, c) is Box(c, r, c+1, r+1).
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.nonzero(mask.any(axis=1))[0]
    if rows.size == 0:
        return None
    cols = np.nonzero(mask.any(axis=0))[0]
    return Box(
        float(cols[0]),
        float(rows[0]),
        float(cols[-1] + 1),
        float(rows[-1] + 1),
    )
