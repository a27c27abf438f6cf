"""Trainable tensor pipeline: tiny backbone + pyramid, multi-stage dynamic
instance interaction head, and the conditional-convolution mask head.

All shapes assume a single frame (no batch dim on the public surface);
the propagation loop feeds one frame at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align as tv_roi_align

from .boxes import FrameSize

STRIDES = (4, 8, 16, 32)
MASK_CHANNELS = 8  # mask feature channels; +2 coordinate channels when consumed
MASK_STRIDE = 8

_SCALE_CLAMP = math.log(100000.0 / 16)
_DELTA_WEIGHTS = (2.0, 2.0, 1.0, 1.0)


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 3
    num_queries: int = 100  # slots (N)
    query_dim: int = 256  # C
    num_stages: int = 6  # M
    feat_channels: int = 64
    roi_size: int = 7
    dyn_channels: int = 32
    attn_heads: int = 8
    ffn_dim: int = 2048
    mask_head_channels: int = 8
    bank_size: int = 18  # T
    mask_on: bool = True
    canonical_level: int = 1
    canonical_box_size: float = 32.0

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        if self.bank_size < 1:
            raise ValueError("bank_size must be >= 1")
        if self.query_dim % self.attn_heads != 0:
            raise ValueError("query_dim must be divisible by attn_heads")


@dataclass
class FeaturePyramid:
    """Per-stride feature maps, finest first; sizes are ceil(input/stride)."""

    levels: list[torch.Tensor]  # each (feat_channels, h_l, w_l)
    strides: tuple[int, ...]
    input_size: FrameSize


@dataclass
class QueryProposalSet:
    """Index-paired instance queries (N, C) and proposal boxes (N, 4) xyxy."""

    queries: torch.Tensor
    proposals: torch.Tensor

    def __post_init__(self):
        if self.queries.shape[0] != self.proposals.shape[0]:
            raise ValueError("queries and proposals must pair by index")

    @property
    def num_slots(self) -> int:
        return self.queries.shape[0]


@dataclass
class StageOutput:
    object_features: torch.Tensor  # (N, C)
    class_logits: torch.Tensor  # (N, num_classes)
    boxes: torch.Tensor  # (N, 4) absolute xyxy

    def class_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.class_logits)


def _conv_block(c_in, c_out, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.GroupNorm(8, c_out),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four downsampling stages producing maps at strides 4/8/16/32."""

    def __init__(self, widths=(32, 64, 96, 128, 160)):
        super().__init__()
        self.stem = _conv_block(3, widths[0], 2)
        self.stage1 = _conv_block(widths[0], widths[1], 2)
        self.stage2 = _conv_block(widths[1], widths[2], 2)
        self.stage3 = _conv_block(widths[2], widths[3], 2)
        self.stage4 = _conv_block(widths[3], widths[4], 2)
        self.out_channels = widths[1:]

    def forward(self, x):
        x = self.stem(x)
        c1 = self.stage1(x)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return [c1, c2, c3, c4]


class PyramidNeck(nn.Module):
    """Lateral 1x1 + top-down pathway; every level ends at feat_channels."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.outputs = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, feats):
        laterals = [conv(f) for conv, f in zip(self.laterals, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
            laterals[i] = laterals[i] + up
        return [conv(f) for conv, f in zip(self.outputs, laterals)]


def assign_pyramid_levels(boxes: torch.Tensor, num_levels: int,
                          canonical_level: int, canonical_size: float) -> torch.Tensor:
    """Route each box to a level by the sqrt-area heuristic."""
    wh = (boxes[:, 2:] - boxes[:, :2]).clamp(min=0)
    scale = torch.sqrt(wh[:, 0] * wh[:, 1]).clamp(min=1e-6)
    lvl = torch.floor(canonical_level + torch.log2(scale / canonical_size))
    return lvl.clamp(0, num_levels - 1).to(torch.int64)


def roi_align_pyramid(pyramid: FeaturePyramid, boxes: torch.Tensor, out_size: int,
                      canonical_level: int = 1, canonical_box_size: float = 32.0) -> torch.Tensor:
    """Pool an out_size x out_size patch per box from its assigned level.

    Bilinear sampling with one sample per bin, pixel-center aligned; boxes
    are detached (no gradient into box coordinates by design).
    """
    boxes = boxes.detach()
    n = boxes.shape[0]
    levels = assign_pyramid_levels(boxes, len(pyramid.levels),
                                   canonical_level, canonical_box_size)
    c = pyramid.levels[0].shape[0]
    out = pyramid.levels[0].new_zeros((n, c, out_size, out_size))
    for lvl, feat in enumerate(pyramid.levels):
        idx = torch.nonzero(levels == lvl, as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        rois = torch.cat([torch.zeros_like(idx, dtype=boxes.dtype)[:, None], boxes[idx]], dim=1)
        pooled = tv_roi_align(
            feat[None],
            rois,
            output_size=out_size,
            spatial_scale=1.0 / pyramid.strides[lvl],
            sampling_ratio=1,
            aligned=True,
        )
        out[idx] = pooled
    return out


def apply_box_deltas(deltas: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Decode (dx, dy, dw, dh) against base boxes; output is always well-ordered."""
    widths = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-4)
    heights = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-4)
    ctr_x = boxes[:, 0] + 0.5 * widths
    ctr_y = boxes[:, 1] + 0.5 * heights
    wx, wy, ww, wh = _DELTA_WEIGHTS
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_SCALE_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_SCALE_CLAMP)
    pred_ctr_x = dx * widths + ctr_x
    pred_ctr_y = dy * heights + ctr_y
    pred_w = torch.exp(dw) * widths
    pred_h = torch.exp(dh) * heights
    return torch.stack(
        [
            pred_ctr_x - 0.5 * pred_w,
            pred_ctr_y - 0.5 * pred_h,
            pred_ctr_x + 0.5 * pred_w,
            pred_ctr_y + 0.5 * pred_h,
        ],
        dim=1,
    )


class DynamicConv(nn.Module):
    """Per-slot convolution whose kernels are generated from the query."""

    def __init__(self, query_dim, feat_channels, dyn_channels, roi_size):
        super().__init__()
        self.feat_channels = feat_channels
        self.dyn_channels = dyn_channels
        self.num_params = feat_channels * dyn_channels
        self.param_gen = nn.Linear(query_dim, 2 * self.num_params)
        self.norm1 = nn.LayerNorm(dyn_channels)
        self.norm2 = nn.LayerNorm(feat_channels)
        self.out_proj = nn.Linear(roi_size * roi_size * feat_channels, query_dim)
        self.out_norm = nn.LayerNorm(query_dim)

    def forward(self, queries, roi_feats):
        # queries (N, C); roi_feats (N, C_feat, s, s)
        n = queries.shape[0]
        params = self.param_gen(queries)
        p1 = params[:, : self.num_params].view(n, self.feat_channels, self.dyn_channels)
        p2 = params[:, self.num_params :].view(n, self.dyn_channels, self.feat_channels)
        feats = roi_feats.flatten(2).permute(0, 2, 1)  # (N, s*s, C_feat)
        feats = F.relu(self.norm1(torch.bmm(feats, p1)))
        feats = F.relu(self.norm2(torch.bmm(feats, p2)))
        out = self.out_proj(feats.flatten(1))
        return F.relu(self.out_norm(out))


class DynamicInteractionStage(nn.Module):
    """One head stage: query self-attention, RoI pooling, dynamic convolution,
    then classification and box-refinement heads. Slot count is conserved and
    the mapping is permutation-equivariant."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.query_dim
        self.cfg = cfg
        self.self_attn = nn.MultiheadAttention(c, cfg.attn_heads, dropout=0.0)
        self.attn_norm = nn.LayerNorm(c)
        self.dynamic = DynamicConv(c, cfg.feat_channels, cfg.dyn_channels, cfg.roi_size)
        self.merge_norm = nn.LayerNorm(c)
        self.ffn = nn.Sequential(
            nn.Linear(c, cfg.ffn_dim), nn.ReLU(inplace=True), nn.Linear(cfg.ffn_dim, c)
        )
        self.ffn_norm = nn.LayerNorm(c)
        self.cls_tower = nn.Sequential(
            nn.Linear(c, c, bias=False), nn.LayerNorm(c), nn.ReLU(inplace=True)
        )
        self.reg_tower = nn.Sequential(
            nn.Linear(c, c, bias=False), nn.LayerNorm(c), nn.ReLU(inplace=True),
            nn.Linear(c, c, bias=False), nn.LayerNorm(c), nn.ReLU(inplace=True),
        )
        self.class_head = nn.Linear(c, cfg.num_classes)
        self.delta_head = nn.Linear(c, 4)
        # start classification near the focal-loss prior
        nn.init.constant_(self.class_head.bias, -math.log((1 - 0.01) / 0.01))

    def forward(self, queries: torch.Tensor, proposals: torch.Tensor,
                pyramid: FeaturePyramid) -> StageOutput:
        q = queries[:, None, :]  # (N, batch=1, C)
        attn_out, _ = self.self_attn(q, q, q, need_weights=False)
        queries = self.attn_norm(queries + attn_out[:, 0, :])

        roi = roi_align_pyramid(pyramid, proposals, self.cfg.roi_size,
                                self.cfg.canonical_level, self.cfg.canonical_box_size)
        interacted = self.dynamic(queries, roi)
        obj = self.merge_norm(queries + interacted)
        obj = self.ffn_norm(obj + self.ffn(obj))

        logits = self.class_head(self.cls_tower(obj))
        deltas = self.delta_head(self.reg_tower(obj))
        boxes = apply_box_deltas(deltas, proposals)
        return StageOutput(object_features=obj, class_logits=logits, boxes=boxes)


class MaskBranch(nn.Module):
    """Fuse all pyramid levels into an 8-channel map at 1/8 input resolution."""

    def __init__(self, feat_channels):
        super().__init__()
        self.laterals = nn.ModuleList(
            nn.Conv2d(feat_channels, feat_channels, 3, padding=1) for _ in STRIDES
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(feat_channels, feat_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(feat_channels, MASK_CHANNELS, 1),
        )

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        target_idx = STRIDES.index(MASK_STRIDE)
        target_size = pyramid.levels[target_idx].shape[-2:]
        acc = None
        for conv, feat in zip(self.laterals, pyramid.levels):
            x = conv(feat[None])
            if x.shape[-2:] != target_size:
                x = F.interpolate(x, size=target_size, mode="bilinear", align_corners=False)
            acc = x if acc is None else acc + x
        return self.fuse(acc)[0]  # (8, H/8, W/8)


def relative_coordinate_maps(boxes: torch.Tensor, map_size: tuple[int, int],
                             frame_size: FrameSize, stride: int = MASK_STRIDE,
                             dtype=torch.float32) -> torch.Tensor:
    """Per-box (dx, dy) maps from the box center, at grid-cell centers.

    Offsets are in input pixels, normalized by frame_diagonal / 8 so values
    stay bounded. Pure function of the centers: translating a center
    translates the map values exactly.
    """
    h, w = map_size
    device = boxes.device
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) * stride
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    scale = frame_size.diagonal / 8.0
    dx = (xx[None] - cx[:, None, None]) / scale
    dy = (yy[None] - cy[:, None, None]) / scale
    return torch.stack([dx, dy], dim=1)  # (N, 2, h, w)


class CondMaskHead(nn.Module):
    """Weight generator + per-slot 3-layer 1x1 FCN over mask features."""

    def __init__(self, query_dim, hidden=8):
        super().__init__()
        in_ch = MASK_CHANNELS + 2
        self.hidden = hidden
        self.layer_shapes = [(in_ch, hidden), (hidden, hidden), (hidden, 1)]
        self.num_params = sum(ci * co + co for ci, co in self.layer_shapes)
        self.weight_gen = nn.Linear(query_dim, self.num_params)

    def forward(self, object_features: torch.Tensor, mask_features: torch.Tensor,
                boxes: torch.Tensor, frame_size: FrameSize) -> torch.Tensor:
        """Per-slot mask probabilities at full frame resolution, (n, H, W)."""
        n = object_features.shape[0]
        h, w = mask_features.shape[-2:]
        if n == 0:
            return mask_features.new_zeros((0, frame_size.height, frame_size.width))
        coords = relative_coordinate_maps(boxes.detach(), (h, w), frame_size,
                                          dtype=mask_features.dtype)
        x = torch.cat([coords, mask_features[None].expand(n, -1, -1, -1)], dim=1)
        x = x.flatten(2).permute(0, 2, 1)  # (n, h*w, 10)
        params = self.weight_gen(object_features)
        offset = 0
        for i, (ci, co) in enumerate(self.layer_shapes):
            wgt = params[:, offset : offset + ci * co].view(n, ci, co)
            offset += ci * co
            bias = params[:, offset : offset + co].view(n, 1, co)
            offset += co
            x = torch.bmm(x, wgt) + bias
            if i < len(self.layer_shapes) - 1:
                x = F.relu(x)
        logits = x.permute(0, 2, 1).reshape(n, 1, h, w)
        logits = F.interpolate(logits, size=(frame_size.height, frame_size.width),
                               mode="bilinear", align_corners=False)
        return torch.sigmoid(logits[:, 0])


class PropSegNet(nn.Module):
    """Full model: backbone, pyramid, M interaction stages, mask machinery,
    learnable initial query-proposal pairs, and the bank-attention scorer."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.backbone = TinyBackbone()
        self.neck = PyramidNeck(self.backbone.out_channels, config.feat_channels)
        self.stages = nn.ModuleList(
            DynamicInteractionStage(config) for _ in range(config.num_stages)
        )
        self.mask_branch = MaskBranch(config.feat_channels)
        self.mask_head = CondMaskHead(config.query_dim, config.mask_head_channels)
        self.bank_scorer = nn.Linear(config.query_dim, 1)
        self.init_queries = nn.Parameter(torch.randn(config.num_queries, config.query_dim) * 0.1)
        # normalized (cx, cy, w, h); whole-frame prior for every slot
        self.init_proposals = nn.Parameter(
            torch.tensor([[0.5, 0.5, 1.0, 1.0]], dtype=torch.float32).repeat(
                config.num_queries, 1
            )
        )

    def extract_features(self, image: torch.Tensor) -> FeaturePyramid:
        """image: (3, H, W) float tensor, both sides >= 32."""
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h < 32 or w < 32:
            raise ValueError(f"image sides must be >= 32, got {h}x{w}")
        feats = self.backbone(image[None])
        levels = [f[0] for f in self.neck(feats)]
        return FeaturePyramid(levels=levels, strides=STRIDES,
                              input_size=FrameSize(h, w))

    def initial_pairs(self, frame_size: FrameSize) -> QueryProposalSet:
        """Learned pairs converted to absolute corner boxes for this frame size."""
        scale = self.init_proposals.new_tensor(
            [frame_size.width, frame_size.height, frame_size.width, frame_size.height]
        )
        cxcywh = self.init_proposals * scale
        boxes = torch.stack(
            [
                cxcywh[:, 0] - 0.5 * cxcywh[:, 2].abs(),
                cxcywh[:, 1] - 0.5 * cxcywh[:, 3].abs(),
                cxcywh[:, 0] + 0.5 * cxcywh[:, 2].abs(),
                cxcywh[:, 1] + 0.5 * cxcywh[:, 3].abs(),
            ],
            dim=1,
        )
        return QueryProposalSet(self.init_queries, boxes)

    def diim_stage(self, pairs: QueryProposalSet, pyramid: FeaturePyramid,
                   stage_index: int = 0) -> StageOutput:
        return self.stages[stage_index](pairs.queries, pairs.proposals, pyramid)

    def seg_head_forward(self, pairs: QueryProposalSet, pyramid: FeaturePyramid,
                         num_stages: int | None = None) -> list[StageOutput]:
        """Iterative head: stage s consumes stage s-1 boxes and features."""
        m = self.config.num_stages if num_stages is None else num_stages
        if m < 1 or m > self.config.num_stages:
            raise ValueError(f"stage count must be in [1, {self.config.num_stages}], got {m}")
        outputs = []
        queries, proposals = pairs.queries, pairs.proposals
        for s in range(m):
            out = self.stages[s](queries, proposals, pyramid)
            outputs.append(out)
            # queries carry gradients forward; box refinement is supervised
            # per stage, so the next stage consumes the boxes detached
            queries, proposals = out.object_features, out.boxes.detach()
        return outputs

    def mask_features(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.mask_branch(pyramid)

    def predict_masks(self, object_features, mask_features, boxes,
                      frame_size: FrameSize) -> torch.Tensor:
        return self.mask_head(object_features, mask_features, boxes, frame_size)
