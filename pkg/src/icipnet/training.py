"""Segmentation loss, AdamW with polynomial decay, and the training loop."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .pipeline import ICIPNet, save_checkpoint
from .rng import Rng

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"non-finite loss at step {step}: {reason}")
        self.step = step


@dataclass
class LossConfig:
    loss_lambda: float = 0.1
    dice_eps: float = 1.0
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ValueError(f"loss_lambda must lie in [0, 1], got {self.loss_lambda}")
        if self.dice_eps <= 0:
            raise ValueError(f"dice_eps must be positive, got {self.dice_eps}")


@dataclass
class OptimConfig:
    lr: float = 3e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    power: float = 0.9

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.total_steps < 1:
            raise ValueError("need lr >= 0, weight_decay >= 0 and total_steps >= 1")


def _check_target(logits: Tensor, target) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != logits.shape[:-1] or logits.shape[-1] != 2:
        raise ShapeError(f"logits {logits.shape} do not match target {t.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target mask must be binary")
    return t.astype(np.float64)


def cross_entropy(logits: Tensor, target, weights: Sequence[float] = (1.0, 1.0)) -> Tensor:
    """Mean over pixels of ``-w[c] * log p[c]`` for the true class ``c``."""
    t = _check_target(logits, target)
    picked = np.stack([(1.0 - t) * weights[0], t * weights[1]], axis=-1)
    return ad.mul(ad.sum(ad.mul(ad.log_softmax(logits, -1), picked)), -1.0 / t.size)


def foreground_probability(logits: Tensor) -> Tensor:
    p = ad.softmax_over_axis(logits, -1)
    return ad.reshape(ad.slice_axis(p, 1, 2, -1), logits.shape[:-1])


def dice_loss(logits: Tensor, target, eps: float = 1.0) -> Tensor:
    """Soft Dice on the foreground probability, computed per sample then averaged.

    Logits of rank 2 (a single H x W mask) count as one sample.
    """
    t = _check_target(logits, target)
    p = foreground_probability(logits)
    if p.ndim == 2:
        p, t = ad.reshape(p, (1,) + p.shape), t[None]
    flat_p = ad.reshape(p, (p.shape[0], -1))
    flat_t = t.reshape(t.shape[0], -1)
    inter = ad.sum(ad.mul(flat_p, flat_t), axis=1)
    denom = ad.add(ad.sum(flat_p, axis=1), flat_t.sum(axis=1) + eps)
    ratio = ad.div(ad.add(ad.mul(inter, 2.0), eps), denom)
    return ad.sub(1.0, ad.mean(ratio))


def total_loss(logits: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    lam = cfg.loss_lambda
    if lam == 0.0:
        return cross_entropy(logits, target, cfg.class_weights)
    if lam == 1.0:
        return dice_loss(logits, target, cfg.dice_eps)
    ce = cross_entropy(logits, target, cfg.class_weights)
    dice = dice_loss(logits, target, cfg.dice_eps)
    return ad.add(ad.mul(ce, 1.0 - lam), ad.mul(dice, lam))


def poly_lr(t: int, cfg: OptimConfig) -> float:
    if not 0 <= t <= cfg.total_steps:
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    return cfg.lr * (1.0 - t / cfg.total_steps) ** cfg.power


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optim_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
               state: AdamWState, cfg: OptimConfig, t: int | None = None) -> float:
    """One AdamW update in place; returns the learning rate used.

    ``t`` is the zero-based step index for the schedule (defaults to the
    state's counter). Decay is applied as a multiplier before the adaptive
    step, so a zero gradient scales parameters by exactly ``1 - lr * decay``.
    """
    t = state.step if t is None else t
    lr = poly_lr(t, cfg)
    k = state.step + 1
    c1 = 1.0 - cfg.beta1 ** k
    c2 = 1.0 - cfg.beta2 ** k
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data * (1.0 - lr * cfg.weight_decay) - lr * update
    state.step = k
    return lr


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    seed: int = 0


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("step,loss,lr\n")
            for s, l, r in zip(self.steps, self.losses, self.lrs):
                fh.write(f"{s},{l:.17g},{r:.17g}\n")


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    ids = np.stack([np.asarray(s.token_ids, dtype=np.int64) for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, ids, masks


def batches(n: int, batch_size: int, rng: Rng):
    """Endless stream of index batches; reshuffled each epoch."""
    epoch = 0
    while True:
        order = rng.child(epoch).permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]
        epoch += 1


def train(dataset, model: ICIPNet, optim: OptimConfig, loss_cfg: LossConfig | None = None,
          cfg: TrainConfig | None = None, out: str | os.PathLike | None = None) -> TrainHistory:
    """Train ``model`` in place; writes history.csv and a checkpoint to ``out`` if given."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig(loss_lambda=model.config.loss_lambda)
    state = AdamWState()
    history = TrainHistory()
    stream = batches(len(dataset), min(cfg.batch_size, len(dataset)), Rng(cfg.seed, 1))
    for step in range(cfg.steps):
        images, ids, masks = stack_batch([dataset[i] for i in next(stream)])
        for p in model.parameters():
            p.grad = None
        try:
            loss = total_loss(model(images, ids), masks, loss_cfg)
            ad.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        grads = {name: p.grad for name, p in model.params.items()}
        for name, g in grads.items():
            if g is not None and not np.isfinite(g).all():
                raise TrainingDiverged(step, f"gradient of {name}")
        lr = optim_step(model.params, grads, state, optim, step)
        history.append(step, loss.item(), lr)
        if step % 25 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %.6f lr %.3g", step, loss.item(), lr)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        history.to_csv(out / "history.csv")
        save_checkpoint(model, out / "checkpoint")
    return history
