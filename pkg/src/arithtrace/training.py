"""Adam training of the regression Transformer and R^2 evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .equations import DatasetSplit, Equation
from .model import TargetScaler, TransformerModel, pad_batch, predict

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-4
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None  # stop early after this many updates (0 = evaluate only)


@dataclass
class TrainReport:
    steps: int
    epoch_losses: list[float]
    step_losses: list[float]
    initial_eval_r2: float
    eval_r2: float
    train_size: int
    eval_size: int
    wall_time: float = 0.0
    scaler: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "epoch_losses": self.epoch_losses,
            "step_losses": self.step_losses,
            "initial_eval_r2": self.initial_eval_r2,
            "eval_r2": self.eval_r2,
            "train_size": self.train_size,
            "eval_size": self.eval_size,
            "wall_time": self.wall_time,
            "scaler": self.scaler,
        }


class Adam:
    def __init__(self, params: Sequence[T.Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def clip_grad_norm(params: Sequence[T.Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.dtype)
    return total


def r2_score(targets, predictions) -> float:
    y = np.asarray(targets, dtype=np.float64)
    yhat = np.asarray(predictions, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant targets")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def eval_r2(model: TransformerModel, equations: Sequence[Equation]) -> float:
    if len(equations) < 2:
        raise ValueError("R^2 needs at least two equations")
    return r2_score([eq.result for eq in equations], predict(model, equations))


def train(model: TransformerModel, dataset: DatasetSplit, config: TrainConfig = TrainConfig()) -> TrainReport:
    """Minimize MSE on standardized targets; the scaler is fit on the train split only."""
    if not dataset.train:
        raise TrainingError("training split is empty")
    started = time.perf_counter()
    targets = np.array([eq.result for eq in dataset.train], dtype=np.float64)
    model.scaler = TargetScaler.fit(targets)
    scaled = model.scaler.scale(targets)
    ids = pad_batch([eq.tokens() for eq in dataset.train])
    lengths = np.array([len(eq.tokens()) for eq in dataset.train])

    evals = dataset.eval if len(dataset.eval) >= 2 else []
    initial = eval_r2(model, evals) if evals else float("nan")

    opt = Adam(model.parameters(), config.lr, (config.beta1, config.beta2), config.eps)
    shuffle_rng = np.random.default_rng([config.seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    step = 0
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    done = config.max_steps is not None and config.max_steps <= 0
    for epoch in range(config.epochs):
        if done:
            break
        order = shuffle_rng.permutation(len(ids))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            width = int(lengths[idx].max())
            T.zero_grads(params)
            pred, _ = model.run(ids[idx, :width], rng=dropout_rng)
            loss = T.mse_loss(pred, scaled[idx].astype(pred.dtype))
            loss.backward()
            clip_grad_norm(params, config.clip_norm)
            step += 1
            warm = min(1.0, step / config.warmup_steps) if config.warmup_steps > 0 else 1.0
            opt.step(config.lr * warm)
            batch_losses.append(loss.item())
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        step_losses.extend(batch_losses)
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("epoch %d: mean loss %.5f (%d steps)", epoch + 1, epoch_losses[-1], step)

    final = eval_r2(model, evals) if evals else float("nan")
    return TrainReport(
        steps=step,
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        initial_eval_r2=initial,
        eval_r2=final,
        train_size=len(dataset.train),
        eval_size=len(dataset.eval),
        wall_time=time.perf_counter() - started,
        scaler={"mean": model.scaler.mean, "std": model.scaler.std},
    )
