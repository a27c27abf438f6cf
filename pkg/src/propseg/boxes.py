"""Axis-aligned box geometry.

Boxes live in absolute pixel corner form (x1, y1, x2, y2) everywhere;
normalized center form appears only at parameter/file boundaries.
Scalar ops work on `Box` values; the `pairwise_*` / `elementwise_*`
functions are the differentiable torch counterparts used by the losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Box:
    """Rectangle in absolute pixel coordinates, corners (x1, y1) <= (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class FrameSize:
    """Frame dimensions in pixels."""

    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"frame size must be positive, got {self}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when disjoint or when both boxes are degenerate."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the enclosure-slack penalty."""
    ex = max(a.x2, b.x2) - min(a.x1, b.x1)
    ey = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclosure = ex * ey
    if enclosure <= 0.0:
        return 0.0
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    iou = inter / union if union > 0.0 else 0.0
    return iou - (enclosure - union) / enclosure


def box_center_distance(a: Box, b: Box) -> float:
    """Euclidean distance between box centers, in pixels."""
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def box_diagonal(a: Box) -> float:
    """Diagonal length; 0 for a degenerate box (callers guard division)."""
    return math.hypot(a.width, a.height)


def clip_box(b: Box, size: FrameSize) -> Box:
    """Clamp all coordinates into [0, width] x [0, height]."""

    def cx(v: float) -> float:
        return min(max(v, 0.0), float(size.width))

    def cy(v: float) -> float:
        return min(max(v, 0.0), float(size.height))

    return Box(cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2))


def box_l1(a: Box, b: Box, size: FrameSize) -> float:
    """Mean absolute coordinate difference after normalizing x by width, y by height."""
    w, h = float(size.width), float(size.height)
    return 0.25 * (
        abs(a.x1 - b.x1) / w
        + abs(a.y1 - b.y1) / h
        + abs(a.x2 - b.x2) / w
        + abs(a.y2 - b.y2) / h
    )


# --- tensor variants -------------------------------------------------------
#
# Shapes follow the usual pairwise convention: boxes1 (N, 4), boxes2 (M, 4),
# result (N, M). All are differentiable w.r.t. the box tensors.


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return inter / union.clamp(min=1e-9)


def pairwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    iou = inter / union.clamp(min=1e-9)
    elt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    erb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclosure = ewh[..., 0] * ewh[..., 1]
    return iou - (enclosure - union) / enclosure.clamp(min=1e-9)


def pairwise_l1(boxes1: torch.Tensor, boxes2: torch.Tensor, size: FrameSize) -> torch.Tensor:
    scale = boxes1.new_tensor([size.width, size.height, size.width, size.height])
    diff = (boxes1[:, None, :] / scale - boxes2[None, :, :] / scale).abs()
    return diff.mean(dim=-1)


def boxes_to_tensor(boxes, dtype=torch.float32) -> torch.Tensor:
    """Stack Box values into an (N, 4) tensor."""
    if len(boxes) == 0:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def tensor_to_boxes(t: torch.Tensor) -> list[Box]:
    """Split an (N, 4) tensor into Box values (corners reordered if needed)."""
    out = []
    for row in t.detach().cpu().tolist():
        x1, y1, x2, y2 = row
        out.append(Box(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)))
    return out
