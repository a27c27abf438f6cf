"""Training loop, online inference driver (full and lite schedules),
checkpointing, and configuration plumbing.

Config files are flat `key = value` text; every TrainConfig / NetConfig /
weight field is a key (see README for the full list). Environment variables
prefixed PROPSEG_ override file values.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .assign import (
    ClipPredictions,
    GtObject,
    LossWeights,
    MatchWeights,
    temporally_consistent_match,
    total_loss,
)
from .boxes import Box, FrameSize, clip_box
from .errors import CheckpointMismatchError, ConfigError, TrainingDiverged
from .evaluate import TrackFrame, VideoInstanceResult
from .net import NetConfig, PropSegNet, QueryProposalSet
from .propagate import FeatureBank, init_state, intra_query_attention, report_tracks, step
from .synth import SyntheticVideo

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ENV_PREFIX = "PROPSEG_"


@dataclass(frozen=True)
class LiteSchedule:
    """Key/non-key frame schedule: all stages on key frames (indices that are
    multiples of the interval), a single stage elsewhere."""

    interval: int = 10
    key_stages: int = 6
    non_key_stages: int = 1

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError("lite interval must be >= 1")
        if self.key_stages < 1 or self.non_key_stages < 1:
            raise ConfigError("stage counts must be >= 1")

    def is_key(self, frame_index: int) -> bool:
        return frame_index % self.interval == 0

    def stages_for(self, frame_index: int) -> int:
        return self.key_stages if self.is_key(frame_index) else self.non_key_stages


@dataclass
class TrainConfig:
    iterations: int = 32000
    base_lr: float = 2.5e-5
    lr_milestones: tuple[int, int] = (24000, 28000)
    lr_warmup_iters: int = 0
    weight_decay: float = 1e-4
    clip_length: int = 3
    seed: int = 0
    grad_clip_norm: float = 1.0
    aug_hflip: bool = True
    aug_min_side: int = 0  # 0 disables multi-scale resize
    aug_max_side: int = 0
    box_only: bool = False
    checkpoint_interval: int = 1000
    threads: int = 1
    score_threshold: float = 0.3
    resume: str = ""
    net: NetConfig = field(default_factory=NetConfig)
    match: MatchWeights = field(default_factory=MatchWeights)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if any(m >= self.iterations for m in self.lr_milestones):
            raise ConfigError("lr milestones must be below the iteration count")
        if self.lr_milestones[0] > self.lr_milestones[1]:
            raise ConfigError("lr milestones must be non-decreasing")
        if self.clip_length < 2:
            raise ConfigError("clip_length must be >= 2 for propagation supervision")
        if (self.aug_min_side == 0) != (self.aug_max_side == 0):
            raise ConfigError("set both aug_min_side and aug_max_side, or neither")
        if self.aug_max_side and self.aug_min_side > self.aug_max_side:
            raise ConfigError("aug_min_side must not exceed aug_max_side")
        if self.box_only and self.net.mask_on:
            object.__setattr__(self, "net", dataclasses.replace(self.net, mask_on=False))


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    """Step schedule: base rate divided by 10 at each milestone, with an
    optional linear warmup ramp."""
    if config.lr_warmup_iters and iteration < config.lr_warmup_iters:
        return config.base_lr * (iteration + 1) / config.lr_warmup_iters
    lr = config.base_lr
    for m in config.lr_milestones:
        if iteration >= m:
            lr /= 10.0
    return lr


# --- flat config files -------------------------------------------------------

_SIMPLE_KEYS = {
    f.name: f.type
    for f in dataclasses.fields(TrainConfig)
    if f.name not in ("net", "match", "loss")
}
_NET_KEYS = {f.name: f.type for f in dataclasses.fields(NetConfig)}
_MATCH_KEYS = {"match_cls": "cls", "match_l1": "l1", "match_giou": "giou"}
_LOSS_KEYS = {
    "loss_box": "box",
    "loss_dice": "dice",
    "loss_mask_focal": "mask_focal",
    "loss_dedup": "dedup",
    "dedup_beta": "dedup_beta",
    "dedup_k": "dedup_k",
}


def _coerce(name: str, value: str, target_type: str):
    t = str(target_type)
    try:
        if "bool" in t:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if "tuple" in t:
            return tuple(int(x) for x in value.replace("(", "").replace(")", "").split(","))
        if "int" in t:
            return int(value)
        if "float" in t:
            return float(value)
        return value
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}") from e


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def config_from_mapping(mapping: dict[str, str]) -> TrainConfig:
    simple: dict = {}
    net: dict = {}
    match: dict = {}
    loss: dict = {}
    for key, value in mapping.items():
        if key in _SIMPLE_KEYS:
            simple[key] = _coerce(key, value, _SIMPLE_KEYS[key])
        elif key in _NET_KEYS:
            net[key] = _coerce(key, value, _NET_KEYS[key])
        elif key in _MATCH_KEYS:
            match[_MATCH_KEYS[key]] = _coerce(key, value, "float")
        elif key in _LOSS_KEYS:
            field_name = _LOSS_KEYS[key]
            kind = "int" if field_name == "dedup_k" else "float"
            loss[field_name] = _coerce(key, value, kind)
        else:
            raise ConfigError(f"unknown configuration key: {key!r}")
    return TrainConfig(
        **simple,
        net=NetConfig(**net),
        match=MatchWeights(**match),
        loss=LossWeights(**loss),
    )


def load_train_config(path: str | Path | None = None,
                      overrides: dict[str, str] | None = None,
                      env: dict[str, str] | None = None) -> TrainConfig:
    """File values, then PROPSEG_* environment overrides, then explicit ones."""
    mapping: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        mapping.update(parse_config_text(p.read_text()))
    env = os.environ if env is None else env
    known = set(_SIMPLE_KEYS) | set(_NET_KEYS) | set(_MATCH_KEYS) | set(_LOSS_KEYS)
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in known:
                mapping[name] = value
    if overrides:
        mapping.update(overrides)
    return config_from_mapping(mapping)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: PropSegNet, path: str | Path, *, iteration: int | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "manifest": dataclasses.asdict(model.config),
        "params": model.state_dict(),
        "iteration": iteration,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected: NetConfig | None = None
                    ) -> tuple[PropSegNet, dict]:
    """Rebuild the model from a checkpoint; verify the manifest when an
    expected config is given."""
    p = Path(path)
    if not p.exists():
        raise IOError(f"checkpoint not found: {p}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IOError(f"corrupt checkpoint {p}: {e}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint {p} has format_version {version!r}; expected {CHECKPOINT_VERSION}"
        )
    manifest = payload["manifest"]
    config = NetConfig(**manifest)
    if expected is not None and config != expected:
        raise CheckpointMismatchError(
            f"checkpoint manifest {manifest} does not match the requested "
            f"configuration {dataclasses.asdict(expected)}"
        )
    model = PropSegNet(config)
    model.load_state_dict(payload["params"])
    model.eval()
    extras = {"iteration": payload.get("iteration"), "optimizer": payload.get("optimizer")}
    return model, extras


# --- data plumbing --------------------------------------------------------------


def frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    arr = np.array(frame, dtype=np.uint8, copy=True)  # PIL arrays are read-only
    return torch.from_numpy(arr).permute(2, 0, 1).float() / 255.0


def annotations_to_gt(anns, with_masks: bool) -> list[GtObject]:
    return [
        GtObject(a.instance_id, a.category_id, a.box, a.mask if with_masks else None)
        for a in anns
    ]


def _augment_clip(frames: list[torch.Tensor], gts: list[list[GtObject]],
                  size: FrameSize, flip: bool, short_side: int | None
                  ) -> tuple[list[torch.Tensor], list[list[GtObject]], FrameSize]:
    """Apply one flip/scale decision consistently to a whole clip."""
    out_size = size
    if short_side:
        scale = short_side / min(size.height, size.width)
        out_size = FrameSize(max(32, round(size.height * scale)),
                             max(32, round(size.width * scale)))
    sx = out_size.width / size.width
    sy = out_size.height / size.height
    new_frames = []
    new_gts = []
    for frame, frame_gts in zip(frames, gts):
        f = frame
        if out_size != size:
            f = F.interpolate(f[None], size=(out_size.height, out_size.width),
                              mode="bilinear", align_corners=False)[0]
        if flip:
            f = torch.flip(f, dims=[2])
        new_frames.append(f)
        objs = []
        for g in frame_gts:
            b = Box(g.box.x1 * sx, g.box.y1 * sy, g.box.x2 * sx, g.box.y2 * sy)
            if flip:
                b = Box(out_size.width - b.x2, b.y1, out_size.width - b.x1, b.y2)
            m = g.mask
            if m is not None:
                if out_size != size:
                    mt = torch.from_numpy(m.astype(np.float32))[None, None]
                    mt = F.interpolate(mt, size=(out_size.height, out_size.width),
                                       mode="nearest")[0, 0]
                    m = mt.numpy() > 0.5
                if flip:
                    m = m[:, ::-1].copy()
            objs.append(GtObject(g.instance_id, g.category_id, b, m))
        new_gts.append(objs)
    return new_frames, new_gts, out_size


# --- training --------------------------------------------------------------------


@dataclass
class TrainArtifacts:
    model: PropSegNet
    records: list[dict]
    metrics_path: Path
    checkpoints: list[Path]


def _forward_clip(model: PropSegNet, frames: list[torch.Tensor], frame_size: FrameSize):
    """Propagated forward pass over a clip; gradients flow across frames."""
    pairs = model.initial_pairs(frame_size)
    bank = FeatureBank(model.config.bank_size)
    stage_outs = []
    pyramids = []
    for f in frames:
        pyramid = model.extract_features(f)
        outs = model.seg_head_forward(pairs, pyramid)
        o_t = outs[-1].object_features
        bank.push(o_t)
        if model.config.bank_size == 1:
            new_queries = o_t
        else:
            new_queries = intra_query_attention(bank, o_t, model.bank_scorer)
        # queries propagate with gradients; boxes are per-frame supervised
        pairs = QueryProposalSet(new_queries, outs[-1].boxes.detach())
        stage_outs.append(outs)
        pyramids.append(pyramid)
    return stage_outs, pyramids


def train(config: TrainConfig, videos: list[SyntheticVideo],
          out_dir: str | Path) -> TrainArtifacts:
    """Clip-sampled training with temporally consistent matching.

    Every iteration samples `clip_length` consecutive frames of one video,
    propagates the learned pairs across them, binds gt objects to slots once
    per clip, and applies one AdamW step of the combined loss. Emits one
    metrics record per iteration and periodic checkpoints.
    """
    if not videos:
        raise ConfigError("dataset is empty")
    for v in videos:
        if v.num_frames < config.clip_length:
            raise ConfigError(
                f"video {v.name} has {v.num_frames} frames < clip_length {config.clip_length}"
            )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    start_iteration = 0
    optimizer_state = None
    if config.resume:
        model, extras = load_checkpoint(config.resume, expected=config.net)
        start_iteration = (extras["iteration"] or 0) + 1
        optimizer_state = extras["optimizer"]
        logger.info("resuming from %s at iteration %d", config.resume, start_iteration)
    else:
        model = PropSegNet(config.net)
    model.train()

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.base_lr,
                                  betas=(0.9, 0.999), weight_decay=config.weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    metrics_path = out / "metrics.jsonl"
    metrics_file = metrics_path.open("a" if config.resume else "w")
    records: list[dict] = []
    checkpoints: list[Path] = []
    with_masks = model.config.mask_on

    try:
        for iteration in range(start_iteration, config.iterations):
            lr = learning_rate_at(config, iteration)
            for group in optimizer.param_groups:
                group["lr"] = lr

            vid = videos[int(rng.integers(len(videos)))]
            start = int(rng.integers(0, vid.num_frames - config.clip_length + 1))
            clip_frames = [frame_to_tensor(vid.frames[start + i])
                           for i in range(config.clip_length)]
            clip_gts = [annotations_to_gt(vid.annotations[start + i], with_masks)
                        for i in range(config.clip_length)]
            flip = bool(config.aug_hflip and rng.uniform() < 0.5)
            short = (int(rng.integers(config.aug_min_side, config.aug_max_side + 1))
                     if config.aug_min_side else None)
            clip_frames, clip_gts, work_size = _augment_clip(
                clip_frames, clip_gts, vid.size, flip, short
            )

            stage_outs, pyramids = _forward_clip(model, clip_frames, work_size)
            finals = [outs[-1] for outs in stage_outs]
            assignment = temporally_consistent_match(finals, clip_gts, work_size,
                                                     config.match)
            mask_probs = None
            if with_masks:
                mask_probs = []
                for f, outs in enumerate(stage_outs):
                    frame_map = assignment.per_frame[f]
                    slots = sorted(frame_map.values())
                    if slots:
                        mf = model.mask_features(pyramids[f])
                        probs = model.predict_masks(
                            outs[-1].object_features[slots], mf,
                            outs[-1].boxes[slots], work_size,
                        )
                        mask_probs.append({s: probs[i] for i, s in enumerate(slots)})
                    else:
                        mask_probs.append({})

            preds = ClipPredictions(stage_outs, work_size, mask_probs)
            loss, terms = total_loss(preds, clip_gts, assignment,
                                     config.match, config.loss)
            if not torch.isfinite(loss):
                dump = out / "nan_dump.pt"
                torch.save(
                    {
                        "iteration": iteration,
                        "video_id": vid.video_id,
                        "clip_start": start,
                        "flip": flip,
                        "short_side": short,
                        "terms": terms,
                        "frames": torch.stack(clip_frames),
                    },
                    dump,
                )
                raise TrainingDiverged(
                    f"non-finite loss at iteration {iteration} "
                    f"(video {vid.video_id}, clip start {start}); batch dumped to {dump}",
                    dump_path=str(dump),
                )

            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()

            record = {"iteration": iteration, "lr": lr, "loss": float(loss.detach())}
            record.update({f"loss_{k}": v for k, v in terms.items()})
            records.append(record)
            metrics_file.write(json.dumps(record) + "\n")

            if (iteration + 1) % config.checkpoint_interval == 0:
                cpath = out / f"checkpoint_{iteration + 1:06d}.pt"
                save_checkpoint(model, cpath, iteration=iteration, optimizer=optimizer)
                checkpoints.append(cpath)
    finally:
        metrics_file.close()

    final_path = out / "checkpoint_final.pt"
    save_checkpoint(model, final_path, iteration=config.iterations - 1,
                    optimizer=optimizer)
    checkpoints.append(final_path)
    model.eval()
    return TrainArtifacts(model=model, records=records, metrics_path=metrics_path,
                          checkpoints=checkpoints)


# --- inference --------------------------------------------------------------------


@dataclass
class InferStats:
    frames: int = 0
    key_frames: int = 0
    stage_executions: int = 0
    wall_time: float = 0.0


def infer_video(model: PropSegNet, frames: list[np.ndarray], schedule: LiteSchedule,
                threshold: float, *, video_id: int = 0,
                resize_short: int | None = None
                ) -> tuple[list[VideoInstanceResult], InferStats]:
    """Propagate through a video under the lite schedule and report tracks.

    Key frames run `key_stages` head stages and refresh both queries and
    proposals (pushing the feature bank); non-key frames run
    `non_key_stages` and refresh proposals only. Boxes and masks are
    mapped back to the original resolution when a resize is requested.
    """
    stats = InferStats()
    if not frames:
        return [], stats
    model.eval()
    orig = FrameSize(frames[0].shape[0], frames[0].shape[1])
    work = orig
    if resize_short:
        scale = resize_short / min(orig.height, orig.width)
        work = FrameSize(max(32, round(orig.height * scale)),
                         max(32, round(orig.width * scale)))
    sx = work.width / orig.width
    sy = work.height / orig.height

    t0 = time.perf_counter()
    state = init_state(model, work)
    frame_results = []
    for idx, frame in enumerate(frames):
        tensor = frame_to_tensor(frame)
        if work != orig:
            tensor = F.interpolate(tensor[None], size=(work.height, work.width),
                                   mode="bilinear", align_corners=False)[0]
        stages = min(schedule.stages_for(idx), model.config.num_stages)
        is_key = schedule.is_key(idx)
        result, state = step(state, tensor, model, stages, update_queries=is_key)
        stats.stage_executions += stages
        stats.key_frames += int(is_key)
        stats.frames += 1
        frame_results.append(result)

    per_frame = report_tracks(state, frame_results, threshold)
    by_track: dict[int, dict] = {}
    for frame_idx, observations in enumerate(per_frame):
        for obs in observations:
            entry = by_track.setdefault(obs.track_id, {"probs": [], "frames": {}})
            entry["probs"].append(obs.class_probs)
            box = obs.box
            if work != orig:
                box = clip_box(Box(box.x1 / sx, box.y1 / sy, box.x2 / sx, box.y2 / sy), orig)
            mask = None
            if obs.mask is not None:
                m = obs.mask
                if work != orig:
                    mt = torch.from_numpy(m)[None, None]
                    m = F.interpolate(mt, size=(orig.height, orig.width),
                                      mode="bilinear", align_corners=False)[0, 0].numpy()
                mask = m >= 0.5
            entry["frames"][frame_idx] = TrackFrame(box=box, mask=mask)

    results = []
    for track_id in sorted(by_track):
        entry = by_track[track_id]
        mean_probs = np.mean(entry["probs"], axis=0)
        results.append(
            VideoInstanceResult(
                video_id=video_id,
                track_id=track_id,
                category_id=int(mean_probs.argmax()),
                confidence=float(np.mean([p.max() for p in entry["probs"]])),
                frames=entry["frames"],
            )
        )
    stats.wall_time = time.perf_counter() - t0
    return results, stats
