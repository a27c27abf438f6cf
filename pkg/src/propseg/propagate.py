"""Cross-frame propagation of query-proposal pairs.

A slot (query, proposal index) is the carrier of identity: every slot is
propagated on every frame, slot i's detections on consecutive frames belong
to the same object by construction, and track IDs are just slot bindings
assigned at reporting time. The per-slot feature bank feeds the scoring
attention that enhances queries with their own history.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import Box, FrameSize, clip_box, tensor_to_boxes
from .errors import ConfigError
from .net import PropSegNet, QueryProposalSet


class FeatureBank:
    """Ring buffer of the last `capacity` per-slot feature tensors (N, C)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[torch.Tensor] = deque(maxlen=capacity)

    def push(self, features: torch.Tensor) -> None:
        self._entries.append(features)

    def entries(self) -> list[torch.Tensor]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


def bank_attention_weights(bank: FeatureBank, scorer) -> torch.Tensor:
    """Softmax weights over bank entries, per slot: (len(bank), N)."""
    if len(bank) == 0:
        raise ValueError("feature bank is empty; push the current features first")
    stacked = torch.stack(bank.entries())  # (K, N, C)
    scores = scorer(stacked)[..., 0]  # (K, N)
    return torch.softmax(scores, dim=0)


def intra_query_attention(bank: FeatureBank, current: torch.Tensor, scorer) -> torch.Tensor:
    """Enhance queries with their banked history: weighted sum + residual.

    The newest bank entry must be `current` (its score participates in the
    softmax). A capacity-1 bank disables the module: queries pass through.
    """
    if bank.capacity == 1:
        if len(bank) == 0:
            raise ValueError("feature bank is empty; push the current features first")
        return current
    weights = bank_attention_weights(bank, scorer)  # (K, N)
    stacked = torch.stack(bank.entries())  # (K, N, C)
    mixed = (weights[..., None] * stacked).sum(dim=0)
    return mixed + current


@dataclass
class FrameResult:
    """Per-slot outputs for one frame, ready for reporting/serialization."""

    frame_index: int
    class_probs: np.ndarray  # (N, num_classes)
    boxes: list[Box]  # clipped to the frame
    masks: np.ndarray | None  # (N, H, W) probabilities, or None in box-only mode
    frame_size: FrameSize


@dataclass
class PropagationState:
    pairs: QueryProposalSet
    bank: FeatureBank
    frame_size: FrameSize
    frame_index: int = 0
    slot_track_ids: dict[int, int] = field(default_factory=dict)
    next_track_id: int = 0


def init_state(model: PropSegNet, frame_size: FrameSize) -> PropagationState:
    """Fresh state carrying the model's learned initial pairs; empty bank."""
    with torch.no_grad():
        pairs = model.initial_pairs(frame_size)
        pairs = QueryProposalSet(pairs.queries.detach().clone(),
                                 pairs.proposals.detach().clone())
    return PropagationState(pairs=pairs, bank=FeatureBank(model.config.bank_size),
                            frame_size=frame_size)


def step(state: PropagationState, frame_image: torch.Tensor, model: PropSegNet,
         stages_this_frame: int | None = None, *,
         update_queries: bool = True) -> tuple[FrameResult, PropagationState]:
    """Run the head on one frame and advance the propagation state.

    With update_queries=False (non-key frames of the lite schedule) the bank
    is not pushed and the propagated queries stay unchanged; only the
    proposals are refreshed from the predicted boxes.
    """
    if stages_this_frame is not None and stages_this_frame < 1:
        raise ConfigError(f"stage count must be >= 1, got {stages_this_frame}")
    with torch.no_grad():
        pyramid = model.extract_features(frame_image)
        outs = model.seg_head_forward(state.pairs, pyramid, stages_this_frame)
        final = outs[-1]
        probs = final.class_probs()
        clipped = [clip_box(b, state.frame_size) for b in tensor_to_boxes(final.boxes)]
        masks = None
        if model.config.mask_on:
            mf = model.mask_features(pyramid)
            mask_probs = model.predict_masks(final.object_features, mf,
                                             final.boxes, state.frame_size)
            masks = mask_probs.cpu().numpy()

        result = FrameResult(
            frame_index=state.frame_index,
            class_probs=probs.cpu().numpy(),
            boxes=clipped,
            masks=masks,
            frame_size=state.frame_size,
        )

        clipped_t = torch.tensor([b.as_tuple() for b in clipped],
                                 dtype=final.boxes.dtype)
        if update_queries:
            state.bank.push(final.object_features.detach())
            new_queries = intra_query_attention(
                state.bank, final.object_features.detach(), model.bank_scorer
            ).detach()
        else:
            new_queries = state.pairs.queries
        state.pairs = QueryProposalSet(new_queries, clipped_t)
        state.frame_index += 1
    return result, state


@dataclass
class TrackObservation:
    """One reported slot on one frame."""

    track_id: int
    slot: int
    score: float
    class_probs: np.ndarray
    box: Box
    mask: np.ndarray | None  # probabilities (H, W)


def report_tracks(state: PropagationState, frame_results: list[FrameResult],
                  score_threshold: float) -> list[list[TrackObservation]]:
    """Threshold slots into visible tracks with stable IDs.

    A slot is assigned the next track ID the first frame its top class score
    reaches the threshold, and keeps that ID for the whole video; frames
    below the threshold are gaps, not new tracks. Ties on the same frame are
    ordered by slot index.
    """
    if not (0.0 < score_threshold <= 1.0):
        raise ConfigError(f"score threshold must be in (0, 1], got {score_threshold}")
    per_frame: list[list[TrackObservation]] = []
    for result in frame_results:
        visible = []
        top = result.class_probs.max(axis=1)
        for slot in range(result.class_probs.shape[0]):
            if top[slot] < score_threshold:
                continue
            if slot not in state.slot_track_ids:
                state.slot_track_ids[slot] = state.next_track_id
                state.next_track_id += 1
            visible.append(
                TrackObservation(
                    track_id=state.slot_track_ids[slot],
                    slot=slot,
                    score=float(top[slot]),
                    class_probs=result.class_probs[slot],
                    box=result.boxes[slot],
                    mask=None if result.masks is None else result.masks[slot],
                )
            )
        per_frame.append(visible)
    return per_frame


def frame_result_record(result: FrameResult, score_threshold: float = 0.0) -> list[dict]:
    """JSON-serializable per-slot records for one frame (see README schema)."""
    from .masks import rle_encode

    records = []
    top = result.class_probs.max(axis=1)
    for slot in range(result.class_probs.shape[0]):
        if top[slot] < score_threshold:
            continue
        rec = {
            "frame": result.frame_index,
            "slot": slot,
            "scores": [float(s) for s in result.class_probs[slot]],
            "box": list(result.boxes[slot].as_tuple()),
        }
        if result.masks is not None:
            rec["rle"] = rle_encode(result.masks[slot] >= 0.5)
        records.append(rec)
    return records
