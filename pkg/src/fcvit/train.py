"""Desk-scale training: AdamW with cosine decay and softmax cross-entropy."""

from __future__ import annotations

import json
import math
from typing import IO, Sequence

import numpy as np

from .model import ModelConfig, ModelParams, build_model, model_forward, preset
from .tensor import NonFiniteError, Tensor, cross_entropy, no_grad


class TrainingDivergedError(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied to tensors of rank >= 2 only (conv/linear weights);
    norms, biases and the similarity scalars are not decayed.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if p.ndim >= 2 and self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * step / max(total, 1)))


def accuracy(params: ModelParams, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(images), batch):
            logits = model_forward(params, Tensor(images[i:i + batch].astype(params.head_weight.dtype)))
            correct += int((logits.data.argmax(axis=1) == labels[i:i + batch]).sum())
    return correct / len(images)


def train_toy(images: np.ndarray, labels: np.ndarray, cfg: ModelConfig | None = None, steps: int = 500,
              lr: float = 1e-3, batch_size: int = 64, seed: int = 0, weight_decay: float = 0.05,
              log: IO[str] | None = None, params: ModelParams | None = None) -> tuple[ModelParams, list[dict]]:
    """Train ``cfg`` (default: the micro preset) on ``images``.

    Batches are drawn from a fresh permutation each epoch. One JSON record per
    step is written to ``log`` when given, followed by a final record holding
    the full-set training accuracy.

    Returns:
        The trained parameters and the list of log records.
    """
    cfg = cfg or preset("micro", num_classes=int(labels.max()) + 1)
    params = params or build_model(cfg, seed=seed)
    dtype = params.head_weight.dtype
    opt = AdamW(params.parameters(), lr=lr, weight_decay=weight_decay)
    for p in opt.params:
        p.requires_grad = True
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, len(images))
    order, cursor = rng.permutation(len(images)), 0
    records = []
    for step in range(steps):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(images)), 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        opt.zero_grad()
        try:
            logits = model_forward(params, Tensor(images[idx].astype(dtype)))
            loss = cross_entropy(logits, labels[idx])
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"step {step}: non-finite forward pass ({exc})") from exc
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(f"step {step}: loss {loss_value}")
        loss.backward()
        step_lr = cosine_lr(step, steps, lr)
        opt.step(step_lr)
        rec = {"step": step, "loss": loss_value, "lr": step_lr,
               "acc": float((logits.data.argmax(axis=1) == labels[idx]).mean())}
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
    final = {"final_train_acc": accuracy(params, images, labels)}
    records.append(final)
    if log is not None:
        log.write(json.dumps(final) + "\n")
    return params, records
