"""Stage-3 fine-tuning on base ground truth plus clustering pseudo-labels.

Two entry points share one step routine. train_basic supervises on every
pseudo-labeled novel image for the whole run. train_curated runs the same
loop first, then ranks images by foreground entropy, keeps the clean
fraction under direct supervision and distills the rest through an EMA
teacher with a ramped weight.

RNG streams are split by purpose (base shuffle, clean shuffle, unclean
shuffle, augmentation) so that switching self-training on or off never
perturbs the shuffles shared with the basic loop. That is what makes the
degenerate configuration (clean_ratio 1, online threshold 1) reproduce
the basic run exactly, parameter for parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import segmenter
from .core import IGNORE_ID, ClassSpace, Dataset
from .pseudolabel import PseudoLabelRecord
from .segmenter import LinearSegmenter, TeacherState, TrainConfig
from .uncertainty import SplitState, dynamic_reassign, foreground_entropy, rank_split

STREAM_BASE = 10
STREAM_CLEAN = 11
STREAM_UNCLEAN = 12
STREAM_AUGMENT = 13


@dataclass(frozen=True)
class AugmentationSpec:
    """Weak view: random horizontal flip. Strong view: the same flip plus
    per-channel scale jitter and additive feature noise."""
    flip_prob: float = 0.5
    scale_jitter: float = 0.1
    noise_sigma: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if not 0.0 <= self.scale_jitter < 1.0:
            raise ValueError("scale_jitter must be in [0, 1)")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")


def flip_map(arr: np.ndarray) -> np.ndarray:
    """Horizontal flip along the width axis, for feature/label/mask maps alike."""
    return arr[:, ::-1].copy()


def augment_pair(features: np.ndarray, rng: np.random.Generator,
                 spec: AugmentationSpec):
    """Returns (weak, strong, flipped). Both views share the flip so a label
    map read off the weak view aligns pixelwise with the strong view."""
    flipped = bool(rng.random() < spec.flip_prob)
    weak = flip_map(features) if flipped else features
    scales = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter,
                         size=features.shape[-1])
    noise = rng.normal(0.0, spec.noise_sigma, size=features.shape)
    strong = weak * scales + noise
    return weak, strong, flipped


@dataclass(frozen=True)
class RampUp:
    """Ramp position: epochs into the curated phase vs ramp length."""
    ramp_length: int = 5
    epoch: float = 0.0

    def __post_init__(self):
        if self.ramp_length < 1:
            raise ValueError("ramp_length must be >= 1")
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")


def ramp_weight(r: RampUp) -> float:
    """exp(-5 (1 - t/T)^2), clamped at 1 once t reaches T."""
    frac = min(r.epoch, r.ramp_length) / r.ramp_length
    return math.exp(-5.0 * (1.0 - frac) ** 2)


def online_pseudo_label(teacher_prob: np.ndarray, threshold: float) -> np.ndarray:
    """Argmax where the max probability strictly exceeds threshold, else ignore."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    max_p = teacher_prob.max(axis=-1)
    arg = np.argmax(teacher_prob, axis=-1)
    return np.where(max_p > threshold, arg, IGNORE_ID).astype(np.uint8)


def self_training_loss(model: LinearSegmenter, x_strong: np.ndarray,
                       y_online: np.ndarray):
    """Cross-entropy of the student on the strong view against online labels.

    All-ignored maps yield (0, zero grads) rather than an error.
    """
    return segmenter.ce_loss_grad(model, x_strong, y_online, allow_empty=True)


@dataclass
class FinetuneConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    clean_ratio: float = 0.67
    online_threshold: float = 0.0
    ramp_length: int = 5
    reassign_epoch: int = 5
    ema_momentum: float = 0.99
    dynamic_reassignment: bool = True
    self_training: bool = True
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if not 0.0 < self.clean_ratio <= 1.0:
            raise ValueError("clean_ratio must be in (0, 1]")
        if not 0.0 <= self.online_threshold <= 1.0:
            raise ValueError("online_threshold must be in [0, 1]")
        if self.ramp_length < 1 or self.reassign_epoch < 0:
            raise ValueError("ramp_length must be >= 1 and reassign_epoch >= 0")
        if self.dynamic_reassignment and self.train.epochs < self.reassign_epoch:
            raise ValueError("reassignment needs at least reassign_epoch epochs")


@dataclass
class EpochLog:
    phase: str
    epoch: int            # global index, drives the lr schedule
    loss_base: float
    loss_clean: float
    loss_distill: float
    omega: float
    n_clean: int
    n_unclean: int


def overall_step(model: LinearSegmenter, velocity, teacher: TeacherState | None,
                 batch_base, batch_clean, batch_unclean, omega: float,
                 threshold: float, cfg: TrainConfig, lr: float,
                 aug_rng: np.random.Generator | None = None,
                 aug: AugmentationSpec | None = None):
    """One combined update: supervised base + clean losses, plus omega times
    the distillation loss on the unclean batch, then a single SGD step and
    (when a teacher exists) an EMA update.

    batch_base / batch_clean: lists of (features, labels); batch_unclean:
    list of raw features. An empty unclean batch reproduces the supervised
    step exactly.
    """
    loss_base, (gw_b, gb_b) = segmenter.batch_loss_grad(model, batch_base)
    loss_clean, (gw_c, gb_c) = segmenter.batch_loss_grad(model, batch_clean)
    grad_w = gw_b + gw_c
    grad_b = gb_b + gb_c
    loss_distill = 0.0
    if batch_unclean:
        if teacher is None or aug_rng is None or aug is None:
            raise ValueError("unclean batch requires teacher, augmentation rng and spec")
        sum_w = np.zeros_like(model.weights)
        sum_b = np.zeros_like(model.bias)
        sum_loss = 0.0
        n_supervised = 0
        for x in batch_unclean:
            weak, strong, _ = augment_pair(x, aug_rng, aug)
            labels = online_pseudo_label(segmenter.forward(teacher.model, weak), threshold)
            n_supervised += int((labels != IGNORE_ID).sum())
            loss, (dw, db) = self_training_loss(model, strong, labels)
            sum_loss += loss
            sum_w += dw
            sum_b += db
        n = len(batch_unclean)
        loss_distill = sum_loss / n
        # with every pixel filtered the term vanishes; skip the add so the
        # update stays bitwise equal to the supervised-only step
        if n_supervised > 0:
            grad_w += omega * (sum_w / n)
            grad_b += omega * (sum_b / n)
    segmenter.sgd_step(model, (grad_w, grad_b), velocity, cfg, lr)
    if teacher is not None:
        segmenter.ema_update(teacher, model)
    return loss_base, loss_clean, loss_distill


def _streams(seed: int) -> dict:
    return {
        "base": np.random.default_rng(np.random.SeedSequence([seed, STREAM_BASE])),
        "clean": np.random.default_rng(np.random.SeedSequence([seed, STREAM_CLEAN])),
        "unclean": np.random.default_rng(np.random.SeedSequence([seed, STREAM_UNCLEAN])),
        "aug": np.random.default_rng(np.random.SeedSequence([seed, STREAM_AUGMENT])),
    }


def _epoch(model, velocity, lr, base_pairs, clean_pairs, unclean_feats,
           teacher, omega, cfg: FinetuneConfig, streams):
    """One epoch of combined steps; returns mean component losses.

    base_pairs / clean_pairs: id -> (features, labels); unclean_feats:
    id -> features, empty dict when distillation is off this epoch.
    """
    bs = cfg.train.batch_size
    base_ids = sorted(base_pairs)
    clean_ids = sorted(clean_pairs)
    unclean_ids = sorted(unclean_feats)
    n_steps = segmenter.steps_per_epoch(bs, len(base_ids), len(clean_ids), len(unclean_ids))
    base_batches = segmenter.cyclic_batches(
        base_ids, streams["base"].permutation(len(base_ids)), n_steps, bs)
    clean_batches = segmenter.cyclic_batches(
        clean_ids, streams["clean"].permutation(len(clean_ids)), n_steps, bs)
    if unclean_ids:
        unclean_batches = segmenter.cyclic_batches(
            unclean_ids, streams["unclean"].permutation(len(unclean_ids)), n_steps, bs)
    else:
        unclean_batches = [[] for _ in range(n_steps)]
    sums = [0.0, 0.0, 0.0]
    for s in range(n_steps):
        losses = overall_step(
            model, velocity, teacher,
            [base_pairs[i] for i in base_batches[s]],
            [clean_pairs[i] for i in clean_batches[s]],
            [unclean_feats[i] for i in unclean_batches[s]],
            omega, cfg.online_threshold, cfg.train, lr,
            aug_rng=streams["aug"], aug=cfg.augment)
        for j in range(3):
            sums[j] += losses[j]
    return tuple(v / n_steps for v in sums)


def _supervision_maps(base: Dataset, records):
    base_pairs = {item.image_id: (item.features, item.labels) for item in base.items}
    labeled = {r.image_id: r for r in records if not r.skipped}
    skipped = sorted(r.image_id for r in records if r.skipped)
    if not labeled:
        raise ValueError("no pseudo-labeled novel images to fine-tune on")
    return base_pairs, labeled, skipped


def entropy_scores(model: LinearSegmenter, novel: Dataset,
                   records, ids) -> dict[str, float]:
    """Foreground entropy of the model on each image's salient-novel mask."""
    by_item = novel.item_map()
    by_rec = {r.image_id: r for r in records}
    out = {}
    for image_id in ids:
        prob = segmenter.forward(model, by_item[image_id].features)
        out[image_id] = foreground_entropy(prob, by_rec[image_id].novel_mask)
    return out


def train_basic(base_model: LinearSegmenter, base: Dataset, novel: Dataset,
                records, class_space: ClassSpace, cfg: FinetuneConfig,
                epoch_hook=None):
    """Fine-tune on base ground truth plus every clustering pseudo-label."""
    model = segmenter.expand_to_novel(base_model, class_space)
    base_pairs, labeled, _ = _supervision_maps(base, records)
    by_item = novel.item_map()
    clean_pairs = {i: (by_item[i].features, r.fused) for i, r in labeled.items()}
    velocity = segmenter.zero_velocity(model)
    streams = _streams(cfg.train.seed)
    history = []
    for epoch in range(cfg.train.epochs):
        lb, lc, _ = _epoch(model, velocity, cfg.train.lr_at(epoch), base_pairs,
                           clean_pairs, {}, None, 0.0, cfg, streams)
        history.append(EpochLog("basic", epoch, lb, lc, 0.0, 0.0, len(clean_pairs), 0))
        if epoch_hook is not None:
            epoch_hook(model, history[-1])
    return model, history


def train_curated(base_model: LinearSegmenter, base: Dataset, novel: Dataset,
                  records, class_space: ClassSpace, cfg: FinetuneConfig,
                  epoch_hook=None):
    """Entropy-curated fine-tuning.

    Phase 1 is the basic loop. Its converged student scores every labeled
    image; the clean fraction stays supervised while the rest feed the
    mean-teacher distillation term. Images skipped at the clustering stage
    join the unclean split with an infinite score. Returns
    (student, teacher or None, split state, history).
    """
    model = segmenter.expand_to_novel(base_model, class_space)
    base_pairs, labeled, skipped = _supervision_maps(base, records)
    by_item = novel.item_map()
    velocity = segmenter.zero_velocity(model)
    streams = _streams(cfg.train.seed)
    history = []
    epochs = cfg.train.epochs
    all_clean = {i: (by_item[i].features, r.fused) for i, r in labeled.items()}
    for epoch in range(epochs):
        lb, lc, _ = _epoch(model, velocity, cfg.train.lr_at(epoch), base_pairs,
                           all_clean, {}, None, 0.0, cfg, streams)
        history.append(EpochLog("basic", epoch, lb, lc, 0.0, 0.0, len(all_clean), 0))
        if epoch_hook is not None:
            epoch_hook(model, history[-1])

    records_list = list(labeled.values())
    state = rank_split(entropy_scores(model, novel, records_list, sorted(labeled)),
                       cfg.clean_ratio)
    if skipped:
        scores = dict(state.scores)
        scores.update({i: math.inf for i in skipped})
        state = SplitState(state.clean, state.unclean + skipped, scores, state.clean_ratio)
        state.validate()

    teacher = TeacherState(model.copy(), cfg.ema_momentum) if cfg.self_training else None
    for t in range(epochs):
        epoch = epochs + t
        if cfg.dynamic_reassignment and t == cfg.reassign_epoch and not state.reassigned:
            fresh = entropy_scores(model, novel, records_list, state.clean)
            state = dynamic_reassign(state, fresh)
        omega = ramp_weight(RampUp(cfg.ramp_length, t))
        clean_pairs = {i: all_clean[i] for i in state.clean}
        if cfg.self_training:
            unclean_feats = {i: by_item[i].features for i in state.unclean}
        else:
            unclean_feats = {}
        lb, lc, ld = _epoch(model, velocity, cfg.train.lr_at(epoch), base_pairs,
                            clean_pairs, unclean_feats, teacher, omega, cfg, streams)
        history.append(EpochLog("curated", epoch, lb, lc, ld, omega,
                                len(state.clean), len(state.unclean)))
        if epoch_hook is not None:
            epoch_hook(model, history[-1])
    return model, teacher, state, history
