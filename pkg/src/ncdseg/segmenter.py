"""Reference per-pixel segmenter: linear softmax over feature vectors.

Parameters live in float64; checkpoints are float32 (see dataio).
Gradients are analytic; see tests for the finite-difference checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dataio
from .core import IGNORE_ID, ClassSpace, Dataset


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    lr_decay_epoch: int = 15
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        """Single-step decay schedule."""
        if epoch >= self.lr_decay_epoch:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate


class LinearSegmenter:
    """weights (C, D) and bias (C,) mapping feature vectors to class logits."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, class_space: ClassSpace):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ValueError(f"inconsistent parameter shapes {weights.shape} / {bias.shape}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("non-finite parameters")
        self.weights = weights
        self.bias = bias
        self.class_space = class_space

    @property
    def n_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearSegmenter":
        return LinearSegmenter(self.weights.copy(), self.bias.copy(), self.class_space)

    def save(self, path) -> None:
        dataio.save_model(path, self.weights, self.bias)

    @classmethod
    def load(cls, path, class_space: ClassSpace) -> "LinearSegmenter":
        weights, bias = dataio.load_model(path)
        return cls(weights, bias, class_space)


def init_base_model(class_space: ClassSpace, dim: int) -> LinearSegmenter:
    """Zero-initialized base model with one channel per base class."""
    return LinearSegmenter(np.zeros((class_space.n_base, dim)), np.zeros(class_space.n_base), class_space)


def expand_to_novel(base_model: LinearSegmenter, class_space: ClassSpace) -> LinearSegmenter:
    """Novel-stage model: base rows copied, novel head rows zero-initialized."""
    if base_model.n_channels != class_space.n_base:
        raise ValueError(f"base model has {base_model.n_channels} channels, class space expects {class_space.n_base}")
    weights = np.zeros((class_space.head_total, base_model.dim))
    bias = np.zeros(class_space.head_total)
    weights[:class_space.n_base] = base_model.weights
    bias[:class_space.n_base] = base_model.bias
    return LinearSegmenter(weights, bias, class_space)


def _logits(model: LinearSegmenter, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dim {x.shape[-1]} != model dim {model.dim}")
    flat = x.reshape(-1, model.dim).astype(np.float64)
    return flat @ model.weights.T + model.bias


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: LinearSegmenter, x: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, shape (H, W, C); rows sum to 1."""
    logp = _log_softmax(_logits(model, x))
    return np.exp(logp).reshape(x.shape[0], x.shape[1], model.n_channels)


def ce_loss_grad(model: LinearSegmenter, x: np.ndarray, y: np.ndarray,
                 allow_empty: bool = False):
    """Mean cross-entropy over non-ignore pixels and its exact gradient.

    Returns (loss, (grad_weights, grad_bias)). With ``allow_empty`` an
    all-ignored label map yields zero loss and zero gradients instead of
    raising (the self-training contract).
    """
    if y.shape != x.shape[:2]:
        raise ValueError(f"label shape {y.shape} != feature grid {x.shape[:2]}")
    flat_y = y.reshape(-1)
    valid = flat_y != IGNORE_ID
    n_valid = int(valid.sum())
    if n_valid == 0:
        if allow_empty:
            return 0.0, (np.zeros_like(model.weights), np.zeros_like(model.bias))
        raise ValueError("all pixels ignored")
    if flat_y[valid].max() >= model.n_channels:
        raise ValueError("label id out of range for model channels")
    flat_x = x.reshape(-1, model.dim).astype(np.float64)
    logp = _log_softmax(flat_x @ model.weights.T + model.bias)
    idx = np.nonzero(valid)[0]
    targets = flat_y[idx].astype(np.int64)
    loss = -float(logp[idx, targets].mean())
    dlogits = np.exp(logp[idx])
    dlogits[np.arange(n_valid), targets] -= 1.0
    dlogits /= n_valid
    grad_w = dlogits.T @ flat_x[idx]
    grad_b = dlogits.sum(axis=0)
    return loss, (grad_w, grad_b)


def zero_velocity(model: LinearSegmenter):
    return np.zeros_like(model.weights), np.zeros_like(model.bias)


def sgd_step(model: LinearSegmenter, grad, velocity, cfg: TrainConfig,
             lr: float | None = None):
    """In-place SGD with momentum and decoupled-into-gradient weight decay.

    velocity <- momentum * velocity + grad + weight_decay * params
    params   <- params - lr * velocity
    """
    if lr is None:
        lr = cfg.learning_rate
    grad_w, grad_b = grad
    vel_w, vel_b = velocity
    vel_w *= cfg.momentum
    vel_w += grad_w + cfg.weight_decay * model.weights
    vel_b *= cfg.momentum
    vel_b += grad_b + cfg.weight_decay * model.bias
    model.weights -= lr * vel_w
    model.bias -= lr * vel_b
    return model, velocity


def batch_loss_grad(model: LinearSegmenter, batch, allow_empty: bool = False):
    """Mean of per-image losses/gradients over a list of (features, labels)."""
    if not batch:
        raise ValueError("empty batch")
    total_w = np.zeros_like(model.weights)
    total_b = np.zeros_like(model.bias)
    total_loss = 0.0
    for features, labels in batch:
        loss, (gw, gb) = ce_loss_grad(model, features, labels, allow_empty=allow_empty)
        total_loss += loss
        total_w += gw
        total_b += gb
    n = len(batch)
    return total_loss / n, (total_w / n, total_b / n)


def cyclic_batches(ids: list, perm: np.ndarray, n_steps: int, batch_size: int):
    """Split a shuffled id list into n_steps batches, wrapping around."""
    shuffled = [ids[int(i)] for i in perm]
    n = len(shuffled)
    return [[shuffled[(s * batch_size + j) % n] for j in range(batch_size)]
            for s in range(n_steps)]


def steps_per_epoch(batch_size: int, *split_sizes: int) -> int:
    longest = max((s for s in split_sizes if s > 0), default=0)
    return math.ceil(longest / batch_size) if longest else 0


def train_base(base: Dataset, cfg: TrainConfig) -> LinearSegmenter:
    """Stage-1 training of the base model on the labeled base split."""
    if not base.items:
        raise ValueError("empty base dataset")
    cs = base.class_space
    for item in base.items:
        if item.labels is None:
            raise ValueError(f"base item {item.image_id!r} has no labels")
        lab = item.labels[item.labels != IGNORE_ID]
        if lab.size and lab.max() >= cs.n_base:
            raise ValueError(f"base item {item.image_id!r} contains non-base ids")
    model = init_base_model(cs, base.items[0].features.shape[-1])
    velocity = zero_velocity(model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10]))
    ids = sorted(base.ids())
    by_id = {item.image_id: item for item in base.items}
    n_steps = steps_per_epoch(cfg.batch_size, len(ids))
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for batch_ids in cyclic_batches(ids, rng.permutation(len(ids)), n_steps, cfg.batch_size):
            batch = [(by_id[i].features, by_id[i].labels) for i in batch_ids]
            _, grad = batch_loss_grad(model, batch)
            sgd_step(model, grad, velocity, cfg, lr)
    return model


@dataclass
class TeacherState:
    """Exponential-moving-average copy of a student model."""
    model: LinearSegmenter
    ema_momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must be in [0, 1)")


def ema_update(teacher: TeacherState, student: LinearSegmenter) -> TeacherState:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    tm = teacher.model
    if tm.weights.shape != student.weights.shape:
        raise ValueError("teacher/student parameter shapes differ")
    m = teacher.ema_momentum
    tm.weights *= m
    tm.weights += (1.0 - m) * student.weights
    tm.bias *= m
    tm.bias += (1.0 - m) * student.bias
    return teacher
