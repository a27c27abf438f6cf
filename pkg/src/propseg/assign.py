"""Training-time supervision: matching costs, Hungarian assignment,
temporally consistent matching across a clip, and the loss terms.

All losses are plain functions of torch tensors and differentiable at
generic points; selection steps (Hungarian, top-IoU negatives) are
discrete and happen under no_grad.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import Box, FrameSize, boxes_to_tensor, pairwise_giou, pairwise_iou, pairwise_l1
from .net import StageOutput

logger = logging.getLogger(__name__)

_PROB_EPS = 1e-8


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ValueError("matching weights must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    box: float = 1.0
    dice: float = 5.0
    mask_focal: float = 5.0
    dedup: float = 1.0
    dedup_beta: float = 0.1
    dedup_k: int = 5

    def __post_init__(self):
        if min(self.box, self.dice, self.mask_focal, self.dedup) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dedup_k < 1:
            raise ValueError("dedup_k must be >= 1")


@dataclass
class GtObject:
    instance_id: int
    category_id: int
    box: Box
    mask: np.ndarray | None = None


def _prob_eps(dtype: torch.dtype) -> float:
    # 1e-8 is below float32 resolution next to 1.0; widen just enough there
    return max(_PROB_EPS, float(torch.finfo(dtype).eps))


def focal_term(probs: torch.Tensor, targets: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise focal terms for probabilities vs {0,1} targets."""
    eps = _prob_eps(probs.dtype)
    p = probs.clamp(eps, 1.0 - eps)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p**gamma * torch.log(1 - p)
    return torch.where(targets > 0.5, pos, neg)


def focal_loss(class_probs: torch.Tensor, target_label: int,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss of one class-probability vector, summed over classes.

    target_label == num_classes means background (no positive class).
    """
    num_classes = class_probs.shape[-1]
    targets = torch.zeros_like(class_probs)
    if 0 <= target_label < num_classes:
        targets[..., target_label] = 1.0
    return focal_term(class_probs, targets, alpha, gamma).sum()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    num = 2.0 * (pred * gt).sum()
    den = (pred**2).sum() + (gt**2).sum() + eps
    return 1.0 - num / den


def matching_cost(frame_pred: StageOutput, gt_objects: list[GtObject],
                  frame_size: FrameSize, weights: MatchWeights = MatchWeights(),
                  alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Cost matrix (num_gt, N): weighted focal + L1 + (1 - GIoU)."""
    if not gt_objects:
        raise ValueError("gt_objects must be non-empty")
    probs = frame_pred.class_probs()
    n = probs.shape[0]
    gt_boxes = boxes_to_tensor([g.box for g in gt_objects], dtype=frame_pred.boxes.dtype)
    cost = probs.new_zeros((len(gt_objects), n))
    if weights.cls > 0:
        eps = _prob_eps(probs.dtype)
        p = probs.clamp(eps, 1.0 - eps)
        pos = -alpha * (1 - p) ** gamma * torch.log(p)  # (N, K)
        neg = -(1 - alpha) * p**gamma * torch.log(1 - p)
        neg_total = neg.sum(dim=1)  # all-background focal per slot
        labels = torch.tensor([g.category_id for g in gt_objects])
        # focal(slot, label) = sum of neg terms with the label's swapped for pos
        per_gt = pos[:, labels] - neg[:, labels] + neg_total[:, None]  # (N, num_gt)
        cost = cost + weights.cls * per_gt.t()
    if weights.l1 > 0:
        cost = cost + weights.l1 * pairwise_l1(gt_boxes, frame_pred.boxes, frame_size)
    if weights.giou > 0:
        cost = cost + weights.giou * (1.0 - pairwise_giou(gt_boxes, frame_pred.boxes))
    return cost


def hungarian(cost: torch.Tensor | np.ndarray) -> list[tuple[int, int]]:
    """Globally optimal injective row->column assignment, min(R, C) pairs."""
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass
class ClipAssignment:
    """gt instance -> slot binding for a whole clip.

    per_frame[t] maps gt_instance_id -> slot for every gt live on frame t;
    used_slots holds every slot ever matched in the clip (a slot whose
    object disappeared stays frozen out of later matching).
    """

    per_frame: list[dict[int, int]] = field(default_factory=list)
    used_slots: set[int] = field(default_factory=set)

    def matched_slots(self, frame: int) -> set[int]:
        return set(self.per_frame[frame].values())


def temporally_consistent_match(
    clip_preds: list[StageOutput],
    clip_gts: list[list[GtObject]],
    frame_size: FrameSize,
    weights: MatchWeights = MatchWeights(),
) -> ClipAssignment:
    """Bind each gt object to one slot for the whole clip.

    Frame 0 (and any newly appearing gt later) is matched by Hungarian
    assignment over the matching cost, restricted to slots never matched
    before in this clip; a persisting gt keeps its slot; a disappeared gt's
    slot never re-enters matching.
    """
    if not clip_preds:
        raise ValueError("need at least one frame")
    num_slots = clip_preds[0].class_logits.shape[0]
    binding: dict[int, int] = {}  # gt id -> slot, for the whole clip
    used: set[int] = set()
    assignment = ClipAssignment()
    for pred, gts in zip(clip_preds, clip_gts):
        frame_map: dict[int, int] = {}
        new_gts = []
        for g in gts:
            if g.instance_id in binding:
                frame_map[g.instance_id] = binding[g.instance_id]
            else:
                new_gts.append(g)
        if new_gts:
            free = [s for s in range(num_slots) if s not in used]
            if len(new_gts) > len(free):
                raise ValueError(
                    f"{len(new_gts)} new objects but only {len(free)} free slots; "
                    "increase the slot count"
                )
            with torch.no_grad():
                cost = matching_cost(pred, new_gts, frame_size, weights)
            sub = cost[:, free]
            for gi, fi in hungarian(sub):
                slot = free[fi]
                g = new_gts[gi]
                binding[g.instance_id] = slot
                used.add(slot)
                frame_map[g.instance_id] = slot
        assignment.per_frame.append(frame_map)
    assignment.used_slots = used
    return assignment


def dedup_loss(gt_box: Box | torch.Tensor, unmatched_boxes: torch.Tensor,
               beta: float = 0.1, k: int = 5) -> torch.Tensor:
    """Hinge pushing the k closest-by-IoU unmatched boxes off the gt center.

    mean over the selected negatives of max(beta - C^2/D^2, 0), where C is
    the center distance to the gt box and D the gt diagonal. Selection takes
    the k largest-IoU negatives (ties by slot index); with fewer than k
    negatives, all are used and the mean is over the actual count.
    """
    if isinstance(gt_box, Box):
        gt_t = boxes_to_tensor([gt_box], dtype=unmatched_boxes.dtype
                               if unmatched_boxes.numel() else torch.float32)[0]
    else:
        gt_t = gt_box
    if unmatched_boxes.numel() == 0:
        return torch.zeros((), dtype=gt_t.dtype)
    d_sq = (gt_t[2] - gt_t[0]) ** 2 + (gt_t[3] - gt_t[1]) ** 2
    if d_sq.item() <= 0:
        logger.debug("skipping dedup for degenerate gt box %s", gt_t.tolist())
        return torch.zeros((), dtype=unmatched_boxes.dtype)
    with torch.no_grad():
        ious = pairwise_iou(gt_t[None], unmatched_boxes)[0]
        k_eff = min(k, unmatched_boxes.shape[0])
        # stable sort keeps slot order among equal IoUs
        order = torch.argsort(-ious, stable=True)[:k_eff]
    selected = unmatched_boxes[order]
    cx = 0.5 * (selected[:, 0] + selected[:, 2])
    cy = 0.5 * (selected[:, 1] + selected[:, 3])
    gcx = 0.5 * (gt_t[0] + gt_t[2])
    gcy = 0.5 * (gt_t[1] + gt_t[3])
    c_sq = (cx - gcx) ** 2 + (cy - gcy) ** 2
    hinge = (beta - c_sq / d_sq).clamp(min=0)
    return hinge.mean()


@dataclass
class ClipPredictions:
    """Everything total_loss consumes for one clip."""

    stage_outputs: list[list[StageOutput]]  # [frame][stage]
    frame_size: FrameSize
    # per frame: slot -> predicted mask probabilities (H, W); None in box-only mode
    mask_probs: list[dict[int, torch.Tensor]] | None = None


def total_loss(preds: ClipPredictions, clip_gts: list[list[GtObject]],
               assignment: ClipAssignment, match_weights: MatchWeights = MatchWeights(),
               loss_weights: LossWeights = LossWeights(),
               alpha: float = 0.25, gamma: float = 2.0) -> tuple[torch.Tensor, dict]:
    """Clip loss averaged over frames, with a per-term breakdown.

    Classification supervises every slot at every stage (unmatched slots
    toward background); L1/GIoU supervise matched slots at every stage;
    dedup and mask terms use final-stage outputs only. Each term is
    normalized by the number of gt objects on its frame.
    """
    num_frames = len(preds.stage_outputs)
    num_classes = preds.stage_outputs[0][0].class_logits.shape[1]
    dev_ref = preds.stage_outputs[0][0].class_logits
    terms = {
        "cls": dev_ref.new_zeros(()),
        "l1": dev_ref.new_zeros(()),
        "giou": dev_ref.new_zeros(()),
        "dedup": dev_ref.new_zeros(()),
    }
    mask_on = preds.mask_probs is not None
    if mask_on:
        terms["dice"] = dev_ref.new_zeros(())
        terms["mask_focal"] = dev_ref.new_zeros(())

    for f in range(num_frames):
        gts = clip_gts[f]
        gt_by_id = {g.instance_id: g for g in gts}
        frame_map = assignment.per_frame[f]
        slot_to_gt = {s: gid for gid, s in frame_map.items()}
        norm = max(len(gts), 1)
        final = preds.stage_outputs[f][-1]
        num_slots = final.class_logits.shape[0]

        for stage_out in preds.stage_outputs[f]:
            probs = stage_out.class_probs()
            targets = torch.zeros_like(probs)
            for slot, gid in slot_to_gt.items():
                targets[slot, gt_by_id[gid].category_id] = 1.0
            terms["cls"] = terms["cls"] + focal_term(probs, targets, alpha, gamma).sum() / norm
            if frame_map:
                slots = sorted(frame_map.values())
                gt_boxes = boxes_to_tensor(
                    [gt_by_id[slot_to_gt[s]].box for s in slots],
                    dtype=stage_out.boxes.dtype,
                )
                pred_boxes = stage_out.boxes[slots]
                l1 = pairwise_l1(pred_boxes, gt_boxes, preds.frame_size).diagonal().sum()
                giou = (1.0 - pairwise_giou(pred_boxes, gt_boxes).diagonal()).sum()
                terms["l1"] = terms["l1"] + l1 / norm
                terms["giou"] = terms["giou"] + giou / norm

        if loss_weights.dedup > 0 and gts:
            unmatched = [s for s in range(num_slots) if s not in slot_to_gt]
            if unmatched:
                neg_boxes = final.boxes[unmatched]
                acc = dev_ref.new_zeros(())
                for g in gts:
                    acc = acc + dedup_loss(g.box, neg_boxes,
                                           loss_weights.dedup_beta, loss_weights.dedup_k)
                terms["dedup"] = terms["dedup"] + acc / norm

        if mask_on:
            frame_masks = preds.mask_probs[f]
            for slot, gid in slot_to_gt.items():
                g = gt_by_id[gid]
                if g.mask is None or slot not in frame_masks:
                    continue
                pred_mask = frame_masks[slot]
                gt_mask = torch.as_tensor(g.mask, dtype=pred_mask.dtype)
                terms["dice"] = terms["dice"] + dice_loss(pred_mask, gt_mask) / norm
                terms["mask_focal"] = terms["mask_focal"] + (
                    focal_term(pred_mask, gt_mask, alpha, gamma).mean() / norm
                )

    for key in terms:
        terms[key] = terms[key] / num_frames

    box_term = (
        match_weights.l1 * terms["l1"]
        + match_weights.giou * terms["giou"]
        + loss_weights.dedup * terms["dedup"]
    )
    total = match_weights.cls * terms["cls"] + loss_weights.box * box_term
    if mask_on:
        total = total + loss_weights.dice * terms["dice"]
        total = total + loss_weights.mask_focal * terms["mask_focal"]
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    return total, breakdown
