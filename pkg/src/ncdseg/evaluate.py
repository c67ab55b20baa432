"""Confusion-matrix scoring and cluster-to-class matching.

Model channels and ground-truth classes live in different spaces once
clustering is involved: novel channels carry arbitrary (or provisional
over-clustered) indices. Matching resolves them against the labeled val
split before any IoU is computed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import segmenter
from .core import IGNORE_ID, Dataset
from .segmenter import LinearSegmenter


def confusion(pred: np.ndarray, gt: np.ndarray, n_pred: int, n_gt: int) -> np.ndarray:
    """Counts[p, g] over pixels where neither map is the ignore id."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = (gt != IGNORE_ID) & (pred != IGNORE_ID)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.max() >= n_pred or g.max() >= n_gt):
        raise ValueError("label id out of range for confusion matrix")
    return np.bincount(p * n_gt + g, minlength=n_pred * n_gt).reshape(n_pred, n_gt)


def miou(conf: np.ndarray, classes) -> float:
    """Mean of per-class TP / (TP + FP + FN).

    Classes with no pixels in either prediction or ground truth are left
    out of the mean; if that empties the class set, raise.
    """
    class_list = sorted(set(int(c) for c in classes))
    if not class_list:
        raise ValueError("empty class set")
    n_pred, n_gt = conf.shape
    values = []
    for c in class_list:
        tp = int(conf[c, c]) if c < n_pred and c < n_gt else 0
        pred_total = int(conf[c, :].sum()) if c < n_pred else 0
        gt_total = int(conf[:, c].sum()) if c < n_gt else 0
        union = pred_total + gt_total - tp
        if union == 0:
            continue
        values.append(tp / union)
    if not values:
        raise ValueError("every requested class is absent from pred and gt")
    return float(np.mean(values))


@dataclass(frozen=True)
class ClusterMapping:
    """Block-relative novel channel index -> ground-truth novel class index."""
    mode: str
    channel_to_class: dict

    def matched_total(self, block: np.ndarray) -> int:
        return int(sum(block[ch, cl] for ch, cl in self.channel_to_class.items()))


def match_clusters(block: np.ndarray, mode: str) -> ClusterMapping:
    """Resolve novel channels against novel classes on a contingency block.

    one-to-one: Hungarian assignment maximizing the matched pixel count
    (square block required). many-to-one: each channel independently takes
    its argmax class, ties to the lowest class index.
    """
    block = np.asarray(block)
    if block.size == 0:
        raise ValueError("empty contingency block")
    if mode == "one-to-one":
        if block.shape[0] != block.shape[1]:
            raise ValueError(f"one-to-one matching needs a square block, got {block.shape}")
        rows, cols = linear_sum_assignment(block, maximize=True)
        mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    elif mode == "many-to-one":
        mapping = {r: int(np.argmax(block[r])) for r in range(block.shape[0])}
    else:
        raise ValueError(f"unknown mapping mode {mode!r}")
    return ClusterMapping(mode, mapping)


def predict(model: LinearSegmenter, features: np.ndarray) -> np.ndarray:
    """Per-pixel argmax channel, uint8."""
    prob = segmenter.forward(model, features)
    return np.argmax(prob, axis=-1).astype(np.uint8)


def evaluate(model: LinearSegmenter, val: Dataset, mapping_mode: str) -> dict:
    """Score a novel-stage model on the labeled val split.

    Predictions use channel ids; the novel block of the channel-level
    confusion matrix is matched to true novel classes, channels are merged
    accordingly, and base / novel / all mIoU are computed in class space.
    """
    cs = val.class_space
    n_ch = model.n_channels
    if n_ch < cs.n_base:
        raise ValueError("model has fewer channels than base classes")
    conf_ch = np.zeros((n_ch, cs.n_total), dtype=np.int64)
    for item in val.items:
        if item.labels is None:
            raise ValueError(f"val item {item.image_id!r} has no labels")
        conf_ch += confusion(predict(model, item.features), item.labels, n_ch, cs.n_total)
    block = conf_ch[cs.n_base:, cs.n_base:]
    mapping = match_clusters(block, mapping_mode)
    conf = np.zeros((cs.n_total, cs.n_total), dtype=np.int64)
    for ch in range(n_ch):
        if ch < cs.n_base:
            conf[ch] += conf_ch[ch]
        else:
            conf[cs.n_base + mapping.channel_to_class[ch - cs.n_base]] += conf_ch[ch]
    base_ids = range(cs.n_base)
    novel_ids = range(cs.n_base, cs.n_total)
    return {
        "base_miou": miou(conf, base_ids),
        "novel_miou": miou(conf, novel_ids),
        "all_miou": miou(conf, range(cs.n_total)),
        "mapping": mapping,
        "confusion": conf,
    }
