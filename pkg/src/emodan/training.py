"""Joint landmark/emotion loss, triangular cyclical learning rate and stage-wise training."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import (
    LEFT_EYE,
    RIGHT_EYE,
    EmotionDistribution,
    EmotionLabel,
    LandmarkSet,
    TrainConfig,
    ValidationError,
    as_points,
    class_names,
)
from .data import ArrayDataset
from .geometry import interpupil_distance, mean_shape
from .network import EmotionalDAN

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
LOG_COLUMNS = ("stage", "epoch", "iteration", "lr", "train_total", "train_landmark",
               "train_emotion", "val_total", "val_accuracy")


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class LossBreakdown:
    landmark_term: float  # ||S - S*|| / d
    emotion_term: float  # cross-entropy, nats
    total: float


def joint_loss(pred: LandmarkSet | np.ndarray, gt: LandmarkSet | np.ndarray, probs: EmotionDistribution,
               label: EmotionLabel, cfg: TrainConfig) -> LossBreakdown:
    """alpha * ||pred - gt|| / d  -  beta * log p[label], d the ground-truth inter-pupil distance."""
    p = np.asarray(probs.probs if isinstance(probs, EmotionDistribution) else probs, dtype=np.float64)
    if len(p) != len(class_names(label.scheme)):
        raise ValidationError(f"{len(p)}-way distribution does not match the {label.scheme.value} scheme")
    d = interpupil_distance(gt)
    landmark = float(np.linalg.norm(as_points(pred) - as_points(gt))) / d
    emotion = -math.log(max(float(p[label.class_id]), LOG_CLAMP))
    return LossBreakdown(landmark, emotion, cfg.alpha * landmark + cfg.beta * emotion)


def interpupil_torch(gt: torch.Tensor) -> torch.Tensor:
    left = gt[:, list(LEFT_EYE)].mean(1)
    right = gt[:, list(RIGHT_EYE)].mean(1)
    return torch.linalg.norm(left - right, dim=1)


def batch_loss(shapes: torch.Tensor, gt: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor,
               alpha: float, beta: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch means of (total, landmark term, emotion term)."""
    d = interpupil_torch(gt)
    landmark = torch.linalg.norm((shapes - gt).flatten(1), dim=1) / d
    logp = torch.log_softmax(logits, dim=1).clamp(min=math.log(LOG_CLAMP))
    emotion = -logp.gather(1, labels.view(-1, 1)).squeeze(1)
    landmark, emotion = landmark.mean(), emotion.mean()
    return alpha * landmark + beta * emotion, landmark, emotion


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    max_lr: float = 0.05
    step_size: int = 2000

    def __post_init__(self):
        if not self.base_lr < self.max_lr:
            raise ValidationError("base_lr must be smaller than max_lr")
        if self.step_size < 1:
            raise ValidationError("step_size must be >= 1")


def cyclical_lr(iteration: int, sched: LrSchedule) -> float:
    """Triangular policy: base -> max over step_size iterations, then back down."""
    cycle = math.floor(1 + iteration / (2 * sched.step_size))
    x = abs(iteration / sched.step_size - 2 * cycle + 1)
    return sched.base_lr + (sched.max_lr - sched.base_lr) * max(0.0, 1.0 - x)


def init_canonical_shape(model: EmotionalDAN, landmarks: np.ndarray) -> None:
    shape = mean_shape(list(landmarks))
    with torch.no_grad():
        model.canonical_shape.copy_(torch.tensor(np.array(shape.points), dtype=model.canonical_shape.dtype))


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _tensors(ds: ArrayDataset, dtype):
    return (
        torch.as_tensor(ds.images, dtype=dtype).unsqueeze(1),
        torch.as_tensor(ds.landmarks, dtype=dtype),
        torch.as_tensor(ds.labels, dtype=torch.long),
    )


def evaluate(model: EmotionalDAN, ds: ArrayDataset, cfg: TrainConfig, stage: Optional[int] = None,
             batch_size: int = 64) -> dict:
    """Eval-mode loss terms, accuracy and mean per-point normalized landmark error."""
    upto = (stage - 1) if stage is not None else None
    x, y_lm, y_cls = _tensors(ds, model.canonical_shape.dtype)
    was = model.training
    model.eval()
    sums = dict(total=0.0, landmark=0.0, emotion=0.0, correct=0, point_err=0.0)
    try:
        with torch.no_grad():
            for i in range(0, len(y_cls), batch_size):
                sl = slice(i, i + batch_size)
                r = model(x[sl], upto=upto)[-1]
                n = len(y_cls[sl])
                total, lm, em = batch_loss(r.shape, y_lm[sl], r.logits, y_cls[sl], cfg.alpha, cfg.beta)
                sums["total"] += total.item() * n
                sums["landmark"] += lm.item() * n
                sums["emotion"] += em.item() * n
                sums["correct"] += int((r.logits.argmax(1) == y_cls[sl]).sum())
                d = interpupil_torch(y_lm[sl])
                sums["point_err"] += (torch.linalg.norm(r.shape - y_lm[sl], dim=2).mean(1) / d).sum().item()
    finally:
        model.train(was)
    n = max(len(y_cls), 1)
    return {
        "total": sums["total"] / n,
        "landmark": sums["landmark"] / n,
        "emotion": sums["emotion"] / n,
        "accuracy": sums["correct"] / n,
        "landmark_error": sums["point_err"] / n,
    }


def train_stage(stage_index: int, model: EmotionalDAN, train_set: ArrayDataset, val_set: ArrayDataset,
                cfg: TrainConfig) -> tuple[EmotionalDAN, list[dict]]:
    """Optimize the parameters of stage ``stage_index`` (1-based) with all others frozen.

    Momentum SGD on the joint loss under the triangular learning-rate policy,
    validated once per epoch; training stops after ``cfg.patience`` epochs
    without an improvement of at least ``cfg.min_delta`` and the best
    validation state is restored.
    """
    if not len(train_set) or not len(val_set):
        raise ValidationError("train and validation sets must be non-empty")
    if not 1 <= stage_index <= model.n_stages:
        raise ValidationError(f"stage_index {stage_index} outside 1..{model.n_stages}")
    stage = model.stages[stage_index - 1]
    for p in model.parameters():
        p.requires_grad_(False)
    for p in stage.parameters():
        p.requires_grad_(True)
    params = [p for p in stage.parameters()]
    opt = torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum)

    x, y_lm, y_cls = _tensors(train_set, model.canonical_shape.dtype)
    n = len(y_cls)
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    sched = LrSchedule(cfg.base_lr, cfg.max_lr, cfg.step_size or 2 * iters_per_epoch)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage_index)

    best = math.inf
    best_state = copy.deepcopy(stage.state_dict())
    stale = 0
    iteration = 0
    rows = []
    for epoch in range(1, cfg.max_epochs + 1):
        model.eval()
        stage.train()
        order = torch.randperm(n, generator=gen)
        run = np.zeros(3)
        lr = cfg.base_lr
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            lr = cyclical_lr(iteration, sched)
            for g in opt.param_groups:
                g["lr"] = lr
            r = model(x[idx], upto=stage_index - 1)[-1]
            total, lm, em = batch_loss(r.shape, y_lm[idx], r.logits, y_cls[idx], cfg.alpha, cfg.beta)
            if not torch.isfinite(total):
                raise TrainingDivergence(iteration, total.item())
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            run += np.array([total.item(), lm.item(), em.item()]) * len(idx)
            iteration += 1
        run /= n
        val = evaluate(model, val_set, cfg, stage=stage_index)
        rows.append({
            "stage": stage_index, "epoch": epoch, "iteration": iteration, "lr": lr,
            "train_total": run[0], "train_landmark": run[1], "train_emotion": run[2],
            "val_total": val["total"], "val_accuracy": val["accuracy"],
        })
        log.info("stage %d epoch %d: train %.4f val %.4f acc %.3f", stage_index, epoch, run[0], val["total"], val["accuracy"])
        if val["total"] < best - cfg.min_delta:
            best = val["total"]
            best_state = copy.deepcopy(stage.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    stage.load_state_dict(best_state)
    for p in stage.parameters():
        p.requires_grad_(False)
    model.eval()
    return model, rows


def train_model(model: EmotionalDAN, train_set: ArrayDataset, val_set: ArrayDataset, cfg: TrainConfig,
                log_path=None) -> tuple[EmotionalDAN, list[dict]]:
    """Sequential training: each stage is trained to convergence, then frozen."""
    torch.manual_seed(cfg.seed)
    init_canonical_shape(model, train_set.landmarks)
    rows = []
    for t in range(1, model.n_stages + 1):
        model, stage_rows = train_stage(t, model, train_set, val_set, cfg)
        rows.extend(stage_rows)
        if log_path is not None:
            write_log(log_path, rows)
    return model, rows


def write_log(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def numerical_gradient_check(model: EmotionalDAN, sample: tuple[np.ndarray, np.ndarray, int], epsilon: float = 1e-5,
                             n_params: int = 100, seed: int = 0, alpha: float = 0.4, beta: float = 0.6,
                             floor: float = 1e-8) -> tuple[float, np.ndarray, np.ndarray]:
    """Compare autograd against central differences on random scalar parameters.

    Runs in float64 eval mode. Returns (max relative error, analytic, numeric),
    relative error being |a - n| / max(|a|, |n|, floor).
    """
    model = model.double().eval()
    image, gt, label = sample
    x = torch.as_tensor(np.asarray(image), dtype=torch.float64).view(1, 1, *np.shape(image))
    y_lm = torch.as_tensor(np.asarray(gt), dtype=torch.float64).view(1, -1, 2)
    y_cls = torch.tensor([int(label)])
    params = list(model.parameters())
    for p in params:
        p.requires_grad_(True)

    def loss():
        r = model(x)[-1]
        return batch_loss(r.shape, y_lm, r.logits, y_cls, alpha, beta)[0]

    model.zero_grad()
    loss().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p = params[k].view(-1)
            j = int(f - offsets[k])
            analytic.append(params[k].grad.view(-1)[j].item())
            orig = p[j].item()
            p[j] = orig + epsilon
            up = loss().item()
            p[j] = orig - epsilon
            down = loss().item()
            p[j] = orig
            numeric.append((up - down) / (2 * epsilon))
    a, nm = np.asarray(analytic), np.asarray(numeric)
    rel = np.abs(a - nm) / np.maximum(np.maximum(np.abs(a), np.abs(nm)), floor)
    return float(rel.max()), a, nm
