"""Entropy-based uncertainty scoring and clean/unclean image ranking.

Per-pixel entropy is normalized by log(C) so scores are comparable
across class-space sizes; an image score is the mean over its salient
novel pixels. Low score means the model is confident there, so the
image is more likely to carry a correct cluster label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_prob_map


def entropy_map(prob: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Normalized Shannon entropy per pixel, in [0, 1]. 0*log(0) counts as 0.

    ``n_classes``, when given, must equal the channel count; it exists so
    callers can assert which normalization base they are getting.
    """
    prob = as_prob_map(prob)
    c = prob.shape[-1]
    if n_classes is not None and n_classes != c:
        raise ValueError(f"n_classes={n_classes} but prob has {c} channels")
    if c < 2:
        raise ValueError("entropy needs at least 2 channels")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(prob > 0.0, prob * np.log(prob), 0.0)
    ent = -terms.sum(axis=-1) / math.log(c)
    # tiny negative values / >1 excursions are float round-off only
    return np.clip(ent, 0.0, 1.0)


def foreground_entropy(prob: np.ndarray, mask: np.ndarray) -> float:
    """Mean normalized entropy over mask==1 pixels. Empty mask raises."""
    if mask.shape != prob.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match prob {prob.shape[:2]}")
    sel = mask == 1
    if not sel.any():
        raise ValueError("foreground mask is empty")
    return float(entropy_map(prob)[sel].mean())


@dataclass
class SplitState:
    """Outcome of ranking: image id lists plus the scores that produced them."""
    clean: list[str]
    unclean: list[str]
    scores: dict[str, float]
    clean_ratio: float
    reassigned: bool = False
    discarded: tuple[str, ...] = ()

    def validate(self) -> None:
        overlap = set(self.clean) & set(self.unclean)
        if overlap:
            raise ValueError(f"images in both splits: {sorted(overlap)[:3]}")
        missing = [i for i in self.clean + self.unclean if i not in self.scores]
        if missing:
            raise ValueError(f"images without scores: {missing[:3]}")


def rank_split(scores: dict[str, float], clean_ratio: float) -> SplitState:
    """Sort ascending by (score, id) and take the first floor(ratio*N), min 1."""
    if not 0.0 < clean_ratio <= 1.0:
        raise ValueError(f"clean_ratio must be in (0, 1], got {clean_ratio}")
    if not scores:
        raise ValueError("no scored images to rank")
    order = sorted(scores, key=lambda i: (scores[i], i))
    n_clean = max(1, math.floor(clean_ratio * len(order)))
    state = SplitState(order[:n_clean], order[n_clean:], dict(scores), clean_ratio)
    state.validate()
    return state


def dynamic_reassign(state: SplitState, fresh_scores: dict[str, float]) -> SplitState:
    """Re-rank the clean split with fresh scores, demoting the worse half.

    Keeps floor(0.5 * |clean|) images (min 1); the rest move to unclean.
    One-shot: reassigning an already-reassigned state raises.
    """
    if state.reassigned:
        raise ValueError("split was already reassigned once")
    missing = [i for i in state.clean if i not in fresh_scores]
    if missing:
        raise ValueError(f"fresh scores missing for clean images: {missing[:3]}")
    order = sorted(state.clean, key=lambda i: (fresh_scores[i], i))
    n_keep = max(1, math.floor(0.5 * len(order)))
    kept, moved = order[:n_keep], order[n_keep:]
    scores = dict(state.scores)
    scores.update({i: fresh_scores[i] for i in state.clean})
    new_state = SplitState(kept, state.unclean + moved, scores, state.clean_ratio,
                           reassigned=True, discarded=tuple(moved))
    new_state.validate()
    return new_state
