"""Losses, sampling, optimizer and the two training loops.

Phase one distills a frozen teacher's image embedding into the student
encoder under a mean-squared error. Phase two trains the whole model from
prompts: each ground-truth mask gets either its box or 1-10 random
foreground clicks (a fair coin decides), the decoder predicts three masks,
and only the cheapest of them (20 x focal + 1 x dice) is back-propagated.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data.checkpoint import Checkpoint
from .data.dataset import SyntheticScene, mask_box
from .data.rng import philox
from .nn import functional as F
from .nn.module import Conv2d, Module
from .nn.tensor import (NonFiniteError, Tape, Tensor, add, clamp_min, log_sigmoid, mean, mul, neg,
                        power, sigmoid, sub, sum_)
from .sam_head import FOREGROUND, MaskPrediction, PromptSet

LOG_EPS = math.log(1e-7)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    iou_weight: float = 1.0

    def __post_init__(self):
        if min(self.focal_weight, self.dice_weight, self.iou_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.focal_alpha <= 1 or self.focal_gamma < 0 or self.dice_eps <= 0:
            raise ValueError("need 0 <= focal_alpha <= 1, focal_gamma >= 0, dice_eps > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 8
    lr_init: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "cosine"
    max_masks_per_image: int = 64
    min_points: int = 1
    max_points: int = 10
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_points <= self.max_points <= 10:
            raise ValueError("need 1 <= min_points <= max_points <= 10")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.epochs < 1 or self.batch_size < 1 or self.max_masks_per_image < 1:
            raise ValueError("epochs, batch_size and max_masks_per_image must be >= 1")
        if self.lr_init < 0 or self.weight_decay < 0 or not 0 <= self.hflip_prob <= 1:
            raise ValueError("lr_init, weight_decay >= 0 and hflip_prob in [0, 1] required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


# -- losses -------------------------------------------------------------------

def _target(target, like: Tensor) -> np.ndarray:
    t = np.asarray(target, dtype=np.float32)
    if t.shape != like.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {like.shape}")
    return t


def focal_loss(logits: Tensor, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log(max(p_t, 1e-7))."""
    t = _target(target, logits)
    z = mul(logits, 2 * t - 1)                      # p_t = sigmoid(z)
    log_pt = clamp_min(log_sigmoid(z), LOG_EPS)
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    per_pixel = mul(power(sigmoid(neg(z)), gamma), log_pt)     # 1 - p_t = sigmoid(-z)
    return mul(mean(mul(per_pixel, alpha_t)), -1.0)


def dice_loss(logits: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps) with p = sigmoid(logits)."""
    t = _target(target, logits)
    p = sigmoid(logits)
    num = add(mul(sum_(mul(p, t)), 2.0), eps)
    den = add(sum_(p), float(t.sum()) + eps)
    return sub(1.0, num / den)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(inter / union)


@dataclass
class MultimaskLoss:
    total: Tensor
    index: int
    focal: float
    dice: float
    iou_mse: float
    per_mask: np.ndarray        # combined focal/dice loss of each candidate


def multimask_loss(pred: MaskPrediction, target, cfg: LossConfig = LossConfig()) -> MultimaskLoss:
    """Cheapest of the three candidates plus the IoU-head regression term.

    ``pred.logits`` must already match ``target`` in resolution. Only the
    selected candidate's focal/dice terms enter the returned total, so the
    other two logit maps receive exactly zero gradient. Ties pick the lowest
    index.
    """
    t = np.asarray(target, dtype=bool)
    n = pred.logits.shape[0]
    focals, dices, combined = [], [], []
    for i in range(n):
        li = pred.logits[i]
        f = focal_loss(li, t, cfg.focal_gamma, cfg.focal_alpha)
        d = dice_loss(li, t, cfg.dice_eps)
        focals.append(f)
        dices.append(d)
        combined.append(add(mul(f, cfg.focal_weight), mul(d, cfg.dice_weight)))
    per_mask = np.array([c.item() for c in combined])
    idx = int(np.argmin(per_mask))
    actual = np.array([mask_iou(pred.logits.data[i] > 0, t) for i in range(n)], dtype=np.float32)
    iou_mse = mean(power(sub(pred.iou_scores, actual), 2))
    total = add(combined[idx], mul(iou_mse, cfg.iou_weight))
    return MultimaskLoss(total, idx, focals[idx].item(), dices[idx].item(), iou_mse.item(), per_mask)


def distill_l2(student_emb: Tensor, teacher_emb) -> Tensor:
    teacher = teacher_emb.data if isinstance(teacher_emb, Tensor) else np.asarray(teacher_emb)
    if tuple(student_emb.shape) != teacher.shape:
        raise ValueError(f"student {student_emb.shape} and teacher {teacher.shape} embeddings differ")
    return mean(power(sub(student_emb, teacher), 2))


# -- sampling and augmentation --------------------------------------------------

def sample_prompt(rng: np.random.Generator, gt_mask: np.ndarray, gt_box, cfg: TrainConfig = TrainConfig(),
                  force: str | None = None) -> PromptSet:
    """Box or 1..max_points uniform foreground clicks, chosen by a fair coin."""
    ys, xs = np.nonzero(gt_mask)
    if ys.size == 0:
        raise ValueError("cannot sample a prompt from an empty mask")
    use_box = rng.random() < 0.5
    if force is not None:
        use_box = force == "box"
    if use_box:
        return PromptSet(box=tuple(float(v) for v in gt_box))
    k = int(rng.integers(cfg.min_points, cfg.max_points + 1))
    k = min(k, ys.size)
    pick = rng.choice(ys.size, size=k, replace=False)
    return PromptSet(points=[(xs[i] + 0.5, ys[i] + 0.5, FOREGROUND) for i in pick])


def resize_longest(image: np.ndarray, masks: list[np.ndarray], target: int):
    """Scale so the longer side equals ``target`` and zero-pad to a square.

    Images are resampled bilinearly, masks by nearest neighbour at pixel
    centres. Returns the padded image, masks and the scale factor.
    """
    _, h, w = image.shape
    scale = target / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        resized = image
    else:
        resized = F.bilinear_matrix(h, nh) @ image @ F.bilinear_matrix(w, nw).T
    out = np.zeros((image.shape[0], target, target), dtype=np.float32)
    out[:, :nh, :nw] = resized
    rows = np.minimum(((np.arange(nh) + 0.5) / scale).astype(int), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) / scale).astype(int), w - 1)
    new_masks = []
    for m in masks:
        pm = np.zeros((target, target), dtype=bool)
        pm[:nh, :nw] = np.asarray(m, bool)[rows][:, cols]
        new_masks.append(pm)
    return out, new_masks, scale


def hflip_box(box, width: float):
    x0, y0, x1, y1 = box
    return (width - x1, y0, width - x0, y1)


def hflip_point(point, width: float):
    x, y, *rest = point
    return (width - x, y, *rest)


@dataclass
class Preprocessed:
    image: np.ndarray
    masks: list[np.ndarray]
    boxes: list[tuple[int, int, int, int] | None]
    scale: float
    flipped: bool


def preprocess(image: np.ndarray, masks: list[np.ndarray], input_size: int,
               rng: np.random.Generator | None = None, hflip_prob: float = 0.0) -> Preprocessed:
    img, ms, scale = resize_longest(np.asarray(image, np.float32), masks, input_size)
    flipped = rng is not None and hflip_prob > 0 and rng.random() < hflip_prob
    if flipped:
        img = img[:, :, ::-1].copy()
        ms = [m[:, ::-1].copy() for m in ms]
    boxes = [mask_box(m) if m.any() else None for m in ms]
    return Preprocessed(img, ms, boxes, scale, flipped)


# -- optimizer ------------------------------------------------------------------

def cosine_lr(t: int, total: int, lr_init: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamState, lr: float, cfg: TrainConfig = TrainConfig()) -> None:
    """One in-place AdamW update (decoupled weight decay, bias-corrected)."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay:
            p.data *= np.float32(1 - lr * cfg.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(np.float32)


# -- loops ----------------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict]
    checkpoint: Checkpoint
    steps: int = 0


def _config_snapshot(**configs) -> dict:
    return {k: asdict(v) for k, v in configs.items() if v is not None}


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return math.ceil(n_images / batch_size)


def _image_loss(model, scene: SyntheticScene, rng, cfg: TrainConfig, loss_cfg: LossConfig):
    size = model.config.input_size
    pre = preprocess(scene.image, [inst.mask for inst in scene.instances], size, rng, cfg.hflip_prob)
    usable = [i for i, m in enumerate(pre.masks) if m.any()]
    if not usable:
        return None
    if len(usable) > cfg.max_masks_per_image:
        usable = sorted(rng.choice(usable, size=cfg.max_masks_per_image, replace=False).tolist())
    embedding = model.image_encoder(Tensor(pre.image))
    results = []
    for i in usable:
        prompt = sample_prompt(rng, pre.masks[i], pre.boxes[i], cfg)
        pred = model.decode(embedding, prompt)
        full = MaskPrediction(model.upscale_logits(pred.logits), pred.iou_scores)
        results.append(multimask_loss(full, pre.masks[i], loss_cfg))
    loss = results[0].total
    for r in results[1:]:
        loss = add(loss, r.total)
    return mul(loss, 1.0 / len(results)), results


def train_loop(model, dataset: list[SyntheticScene], cfg: TrainConfig = TrainConfig(),
               loss_cfg: LossConfig = LossConfig(), log=None, max_steps: int | None = None) -> TrainResult:
    """End-to-end prompt-supervised training; returns the trace and final state.

    ``max_steps`` truncates the run; the cosine schedule then spans
    ``max_steps`` instead of the full epoch plan.

    The image order of each epoch and every per-image random draw (flip,
    mask subset, prompts) come from Philox streams keyed by the seed, the
    epoch and the image index, so runs are reproducible bit for bit.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params = model.parameters()
    state = AdamState.zeros(params)
    per_epoch = steps_per_epoch(len(dataset), cfg.batch_size)
    total = cfg.epochs * per_epoch
    if max_steps is not None:
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        total = min(total, max_steps)
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        order = philox(cfg.seed, f"order/{epoch}").permutation(len(dataset))
        for b in range(per_epoch):
            if step >= total:
                break
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr_init)
            with Tape() as tape:
                losses, details = [], []
                for idx in batch:
                    rng = philox(cfg.seed, f"item/{epoch}/{int(idx)}")
                    out = _image_loss(model, dataset[int(idx)], rng, cfg, loss_cfg)
                    if out is not None:
                        losses.append(out[0])
                        details.extend(out[1])
                if not losses:
                    step += 1
                    continue
                loss = losses[0]
                for extra in losses[1:]:
                    loss = add(loss, extra)
                loss = mul(loss, 1.0 / len(losses))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at step {step}")
            tape.backward(loss)
            adamw_step(params, [p.grad for p in params], state, lr, cfg)
            row = {"step": step, "lr": lr,
                   "focal": float(np.mean([d.focal for d in details])),
                   "dice": float(np.mean([d.dice for d in details])),
                   "total": value}
            trace.append(row)
            if log is not None:
                log(row)
            step += 1
    meta = {"phase": "train", "step": step, "seed": cfg.seed,
            "config": _config_snapshot(train=cfg, loss=loss_cfg)}
    return TrainResult(trace, Checkpoint(model.state_dict(), meta), step)


class ChannelAdapter(Module):
    """Trainable 1x1 projection from student to teacher embedding width."""

    def __init__(self, cin: int, cout: int, seed: int = 0):
        super().__init__()
        self.proj = Conv2d(cin, cout, 1, philox(seed, "adapter"), bias=True)

    def forward(self, x):
        return self.proj(x)


def distill_loop(student, teacher, images: list[np.ndarray], cfg: TrainConfig = TrainConfig(),
                 steps: int = 100, start_step: int = 0, total_steps: int | None = None,
                 adapter: ChannelAdapter | None = None, log=None) -> TrainResult:
    """Fit the student encoder to a frozen teacher's embeddings under L2.

    Teacher embeddings are computed once per image. Each step averages the
    loss over ``cfg.batch_size`` images drawn in a seeded order.
    """
    if not images:
        raise ValueError("no images to distill on")
    targets = [teacher(Tensor(img)).data.copy() for img in images]
    params = student.parameters() + (adapter.parameters() if adapter is not None else [])
    state = AdamState.zeros(params)
    total = total_steps if total_steps is not None else start_step + steps
    n = len(images)
    trace = []
    for step in range(start_step, start_step + steps):
        lr = cosine_lr(step, total, cfg.lr_init)
        rng = philox(cfg.seed, f"distill/{step}")
        batch = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        with Tape() as tape:
            loss = None
            for i in batch:
                emb = student(Tensor(images[int(i)]))
                if adapter is not None:
                    emb = adapter(emb)
                term = distill_l2(emb, targets[int(i)])
                loss = term if loss is None else add(loss, term)
            loss = mul(loss, 1.0 / len(batch))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"distillation loss became {value} at step {step}")
        if loss.node_id is not None:
            tape.backward(loss)
            adamw_step(params, [p.grad for p in params], state, lr, cfg)
        row = {"step": step, "lr": lr, "l2": value}
        trace.append(row)
        if log is not None:
            log(row)
    meta = {"phase": "distill", "step": start_step + steps, "seed": cfg.seed,
            "config": _config_snapshot(train=cfg)}
    return TrainResult(trace, Checkpoint(student.state_dict(), meta), start_step + steps)


def embedding_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


__all__ = [
    "LossConfig", "TrainConfig", "focal_loss", "dice_loss", "multimask_loss", "distill_l2",
    "sample_prompt", "preprocess", "resize_longest", "cosine_lr", "adamw_step", "AdamState",
    "train_loop", "distill_loop", "TrainingDivergedError", "NonFiniteError", "embedding_cosine",
    "mask_iou", "ChannelAdapter",
]
