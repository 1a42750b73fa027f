"""Pretext and downstream training loops plus their data plumbing."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .data import ClipRecord, pretext_frame_stream
from .evaluation import accuracy, auc
from .models import DownstreamNet, JPOPNet, save_checkpoint
from .patchgen import DEFAULT_GEOMETRY, Geometry, affine_warp, make_eval_sample, make_jumbled_sample
from .permset import PermutationSet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EarlyStopConfig(_Config):
    patience: int = Field(5, ge=1)
    min_delta: float = Field(0.001, ge=0)


class PretextTrainConfig(_Config):
    lr: float = Field(1e-4, gt=0)
    lr_decay: float = Field(0.95, gt=0, le=1)
    rmsprop_alpha: float = Field(0.9, gt=0, lt=1)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(100, ge=1)
    early_stop: EarlyStopConfig = EarlyStopConfig()
    oversample_pretext: bool = False
    val_mode: Literal["all_arrangements", "ordered_only"] = "all_arrangements"
    val_samples_per_clip: int = Field(2, ge=1)


class DownstreamTrainConfig(_Config):
    lr: float = Field(1e-5, gt=0)
    batch_size: Literal[1] = 1
    max_epochs: int = Field(50, ge=1)
    frame_cap: int = Field(36, ge=1)
    oversample_to_majority: bool = True
    augment: bool = True
    rotation_deg: float = 15.0
    translation_frac: float = 0.1
    scale_range: tuple[float, float] = (1.0, 1.2)
    monitor: Literal["val_acc", "val_auc"] = "val_acc"
    early_stop: EarlyStopConfig = EarlyStopConfig()


# ---------------------------------------------------------------------------
# frame plumbing


def divide_frames(frames: Sequence, n_groups: int = 9, literal: bool = False) -> list[list]:
    """Split an ordered frame list into ``n_groups`` contiguous groups.

    Group ``i`` takes ceil(remaining / groups_left) frames, so sizes differ by
    at most one. Fewer than ``n_groups`` frames: the last frame is repeated.
    ``literal=True`` uses the total count instead of the remaining count,
    which leaves trailing groups empty; kept for comparison only.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("cannot divide an empty frame list")
    if literal:
        total = len(frames)
        groups, start = [], 0
        for i in range(1, n_groups + 1):
            n = math.ceil(total / (n_groups - i + 1))
            groups.append(frames[start : start + n])
            start += n
        return groups
    if len(frames) < n_groups:
        frames = frames + [frames[-1]] * (n_groups - len(frames))
    groups, start = [], 0
    for i in range(n_groups):
        n = math.ceil((len(frames) - start) / (n_groups - i))
        groups.append(frames[start : start + n])
        start += n
    return groups


def sample_frames(n_frames: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Frame indices: all of them under the cap, else a sorted uniform subset."""
    if n_frames < 1:
        raise ValueError("clip has no frames")
    if n_frames <= cap:
        return np.arange(n_frames)
    return np.sort(rng.choice(n_frames, size=cap, replace=False))


@dataclass
class Oversampled:
    records: list
    counts: dict
    factor: dict


def oversample(records: Sequence, target_per_class: int | None = None, rng: np.random.Generator | None = None) -> Oversampled:
    """Replicate records of the smaller class until both classes have the same count.

    Extra copies cycle through the class in shuffled passes, so every member
    is repeated before any is repeated twice.
    """
    rng = rng or np.random.default_rng(0)
    by_class = {0: [r for r in records if r.label == 0], 1: [r for r in records if r.label == 1]}
    for c, members in by_class.items():
        if not members:
            raise ValueError(f"class {c} has no samples; cannot oversample")
    target = target_per_class or max(len(m) for m in by_class.values())
    out = list(records)
    for c, members in by_class.items():
        need = target - len(members)
        while need > 0:
            order = rng.permutation(len(members))[:need]
            out.extend(members[int(i)] for i in order)
            need -= len(order)
    counts = {c: sum(r.label == c for r in out) for c in (0, 1)}
    factor = {c: counts[c] / len(by_class[c]) for c in (0, 1)}
    log.info("oversampled to %s (replication factor %s)", counts, factor)
    return Oversampled(out, counts, factor)


def augment_frame(frame: np.ndarray, rng: np.random.Generator, cfg: DownstreamTrainConfig) -> np.ndarray:
    side = frame.shape[-1]
    t = cfg.translation_frac * side
    return affine_warp(
        frame,
        rotation_deg=float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
        tx=float(rng.uniform(-t, t)),
        ty=float(rng.uniform(-t, t)),
        scale=float(rng.uniform(*cfg.scale_range)),
    )


def clip_groups(
    clip: ClipRecord, cap: int, rng: np.random.Generator, cfg: DownstreamTrainConfig | None = None
) -> list[torch.Tensor]:
    """Frame-capped, optionally augmented, nine-way divided tensors for one clip."""
    frames = clip.frames
    idx = sample_frames(len(frames), cap, rng)
    chosen = [frames[i] for i in idx]
    if cfg is not None and cfg.augment:
        chosen = [augment_frame(f, rng, cfg) for f in chosen]
    groups = divide_frames(chosen)
    return [torch.from_numpy(np.stack(g).astype(np.float32)).unsqueeze(1) for g in groups]


# ---------------------------------------------------------------------------
# early stopping & history


@dataclass
class EarlyStopState:
    patience: int = 5
    min_delta: float = 0.001
    best_metric: float = -math.inf
    best_epoch: int = -1
    counter: int = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record an epoch's metric; True when training should stop."""
        if metric > self.best_metric + self.min_delta or self.best_epoch < 0:
            self.best_metric = metric
            self.best_epoch = epoch
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("nan")
    stopped_early: bool = False
    checkpoint: Path | None = None


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["epoch", "lr", "train_loss", "val_loss", "val_acc"]
    if history and "val_auc" in history[0]:
        cols.append("val_auc")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)
    return path


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def pretext_lr(cfg: PretextTrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay**epoch


def _check_finite(loss: torch.Tensor, model, out_dir, seed, epoch):
    if torch.isfinite(loss):
        return
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "diverged", seed=seed, epoch=epoch, metrics={"loss": float(loss.detach())})
    raise TrainingDiverged(f"loss became {float(loss.detach())} at epoch {epoch}")


# ---------------------------------------------------------------------------
# pretext


def pretext_eval_set(
    clips: Sequence[ClipRecord], pset: PermutationSet, cfg: PretextTrainConfig, geometry: Geometry
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic validation batch: middle frame, center crop, no augmentation."""
    xs, ys = [], []
    r = cfg.val_samples_per_clip
    for i, clip in enumerate(clips):
        frame = clip.frames[clip.n_frames // 2]
        for j in range(r):
            k = 0 if cfg.val_mode == "ordered_only" else (i * r + j) % len(pset)
            s = make_eval_sample(frame, pset, k, geometry)
            xs.append(s.patches)
            ys.append(s.label)
    return torch.from_numpy(np.stack(xs)), torch.tensor(ys)


def _evaluate_pretext(model, x, y, batch_size):
    model.eval()
    losses, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i : i + batch_size])
            losses += F.cross_entropy(logits, y[i : i + batch_size], reduction="sum").item()
            correct += (logits.argmax(1) == y[i : i + batch_size]).sum().item()
    return losses / len(x), correct / len(x)


def train_pretext(
    model: JPOPNet,
    pset: PermutationSet,
    train_clips: Sequence[ClipRecord],
    val_clips: Sequence[ClipRecord],
    cfg: PretextTrainConfig | None = None,
    *,
    geometry: Geometry = DEFAULT_GEOMETRY,
    seed: int = 0,
    out_dir=None,
) -> TrainResult:
    """RMSprop on categorical cross-entropy, one jumbled frame per clip per epoch."""
    cfg = cfg or PretextTrainConfig()
    torch.manual_seed(seed)
    clips = list(train_clips)
    if cfg.oversample_pretext:
        clips = oversample(clips, rng=np.random.default_rng([seed, 7])).records
    val_x, val_y = pretext_eval_set(val_clips, pset, cfg, geometry)
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr, alpha=cfg.rmsprop_alpha)
    stopper = EarlyStopState(cfg.early_stop.patience, cfg.early_stop.min_delta)
    result = TrainResult()
    best_state = None
    for epoch in range(cfg.max_epochs):
        lr = pretext_lr(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        rng = np.random.default_rng([seed, epoch])
        samples = [
            make_jumbled_sample(frame, pset, rng, geometry, {"clip_id": rec.clip_id, "frame_index": k})
            for rec, k, frame in pretext_frame_stream(clips, rng)
        ]
        model.train()
        total, seen = 0.0, 0
        for i in range(0, len(samples), cfg.batch_size):
            batch = samples[i : i + cfg.batch_size]
            x = torch.from_numpy(np.stack([s.patches for s in batch]))
            y = torch.tensor([s.label for s in batch])
            loss = F.cross_entropy(model(x), y)
            _check_finite(loss, model, out_dir, seed, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        val_loss, val_acc = _evaluate_pretext(model, val_x, val_y, cfg.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen, "val_loss": val_loss, "val_acc": val_acc}
        result.history.append(row)
        log.info("pretext epoch %d lr=%.3g train_loss=%.4f val_loss=%.4f val_acc=%.4f", epoch, lr, row["train_loss"], val_loss, val_acc)
        stop = stopper.update(val_acc, epoch)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            result.stopped_early = True
            break
    result.best_epoch, result.best_metric = stopper.best_epoch, stopper.best_metric
    if best_state is not None:
        model.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_history(result.history, out_dir / "history.csv")
        result.checkpoint = save_checkpoint(
            model, out_dir / "pretext", seed=seed, epoch=result.best_epoch,
            metrics={"val_acc": result.best_metric},
            extra={"geometry": geometry.__dict__, "permutation_pool_digest": pset.source_pool_hash},
        )
    return result


# ---------------------------------------------------------------------------
# downstream


def predict_clips(model: DownstreamNet, clips: Sequence[ClipRecord], cap: int, seed: int = 0) -> np.ndarray:
    """Sigmoid scores with a fixed frame selection and no augmentation."""
    model.eval()
    scores = []
    with torch.no_grad():
        for i, clip in enumerate(clips):
            groups = clip_groups(clip, cap, np.random.default_rng([seed, i]))
            scores.append(torch.sigmoid(model(groups)).item())
    return np.asarray(scores)


def train_downstream(
    model: DownstreamNet,
    train_clips: Sequence[ClipRecord],
    val_clips: Sequence[ClipRecord],
    cfg: DownstreamTrainConfig | None = None,
    *,
    seed: int = 0,
    out_dir=None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Adam on binary cross-entropy, one clip per step."""
    cfg = cfg or DownstreamTrainConfig()
    torch.manual_seed(seed)
    clips = list(train_clips)
    if cfg.oversample_to_majority:
        clips = oversample(clips, rng=np.random.default_rng([seed, 11])).records
    val_y = np.array([c.label for c in val_clips])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    stopper = EarlyStopState(cfg.early_stop.patience, cfg.early_stop.min_delta)
    result = TrainResult()
    best_state = None
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([seed, 1000 + epoch])
        model.train()
        total = 0.0
        for i in rng.permutation(len(clips)):
            clip = clips[int(i)]
            logit = model(clip_groups(clip, cfg.frame_cap, rng, cfg))
            loss = F.binary_cross_entropy_with_logits(logit, torch.tensor([float(clip.label)]))
            _check_finite(loss, model, out_dir, seed, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        scores = predict_clips(model, val_clips, cfg.frame_cap, seed)
        eps = 1e-7
        p = np.clip(scores, eps, 1 - eps)
        val_loss = float(-np.mean(val_y * np.log(p) + (1 - val_y) * np.log(1 - p)))
        val_acc = accuracy(val_y, scores)
        val_auc = auc(val_y, scores) if 0 < val_y.sum() < len(val_y) else float("nan")
        row = {"epoch": epoch, "lr": cfg.lr, "train_loss": total / len(clips), "val_loss": val_loss, "val_acc": val_acc, "val_auc": val_auc}
        result.history.append(row)
        log.info("downstream epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f val_auc=%.4f", epoch, row["train_loss"], val_loss, val_acc, val_auc)
        stop = stopper.update(row[cfg.monitor], epoch)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            result.stopped_early = True
            break
    result.best_epoch, result.best_metric = stopper.best_epoch, stopper.best_metric
    if best_state is not None:
        model.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_history(result.history, out_dir / "history.csv")
        result.checkpoint = save_checkpoint(
            model, out_dir / "downstream", seed=seed, epoch=result.best_epoch,
            metrics={cfg.monitor: result.best_metric}, extra=extra_meta,
        )
    return result
