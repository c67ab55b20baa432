"""Clustering pseudo-label construction for the unlabeled novel split.

Per image: confident base predictions, salient-novel mask (saliency with
confident base pixels removed), then fusion of base labels with the
image-level cluster class. Pixels that are neither confident-base nor
salient-novel stay background (0), matching the additive fusion rule.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clustering, dataio, segmenter
from .core import ClassSpace, Dataset

# Images with fewer salient-novel pixels than this are excluded from
# clustering (a mean over a handful of pixels is meaningless) and routed
# to the unclean split later.
MIN_NOVEL_PIXELS = 16


def confident_base_labels(prob: np.ndarray, tau: float) -> np.ndarray:
    """Argmax class where max probability exceeds tau, else 0 (uint8)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    max_p = prob.max(axis=-1)
    arg = np.argmax(prob, axis=-1)
    return np.where(max_p > tau, arg, 0).astype(np.uint8)


def novel_salient_mask(saliency: np.ndarray, base_labels: np.ndarray) -> np.ndarray:
    """Saliency restricted to pixels not claimed by a confident base class."""
    if saliency.shape != base_labels.shape:
        raise ValueError(f"shape mismatch {saliency.shape} vs {base_labels.shape}")
    return (saliency * (base_labels == 0)).astype(np.uint8)


def fuse_labels(base_labels: np.ndarray, mask: np.ndarray, cluster_class: int,
                class_space: ClassSpace) -> np.ndarray:
    """base_labels + cluster_class * mask, with the disjointness precondition checked."""
    if base_labels.shape != mask.shape:
        raise ValueError(f"shape mismatch {base_labels.shape} vs {mask.shape}")
    if not class_space.n_base <= cluster_class < class_space.head_total:
        raise ValueError(f"cluster class {cluster_class} outside novel range "
                         f"[{class_space.n_base}, {class_space.head_total})")
    if np.any((mask == 1) & (base_labels != 0)):
        raise ValueError("novel mask overlaps nonzero base labels")
    return (base_labels.astype(np.int64) + cluster_class * mask.astype(np.int64)).astype(np.uint8)


@dataclass
class PseudoLabelRecord:
    image_id: str
    base_labels: np.ndarray           # confident base predictions
    novel_mask: np.ndarray            # salient-novel pixels
    fused: np.ndarray | None          # None when skipped (undersized mask)
    cluster_id: int | None            # cluster index, None when skipped
    novel_pixels: int
    distance: float = float("nan")    # feature distance to assigned centroid

    @property
    def skipped(self) -> bool:
        return self.cluster_id is None


def build_pseudo_labels(base_model: segmenter.LinearSegmenter, novel: Dataset,
                        class_space: ClassSpace, tau: float, k: int, seed: int,
                        mode: str, min_novel_pixels: int = MIN_NOVEL_PIXELS):
    """Stage-2 driver: label every novel image, cluster the pooled features.

    Returns (records in dataset order, ClusterModel). ``class_space``
    must carry the novel head size matching ``k`` in over mode.
    """
    per_image = {}
    pooled_ids = []
    pooled = []
    for item in novel.items:
        if item.saliency is None:
            raise ValueError(f"novel item {item.image_id!r} has no saliency mask")
        prob = segmenter.forward(base_model, item.features)
        base_lab = confident_base_labels(prob, tau)
        mask = novel_salient_mask(item.saliency, base_lab)
        count = int(mask.sum())
        per_image[item.image_id] = (base_lab, mask, count)
        if count >= min_novel_pixels:
            pooled_ids.append(item.image_id)
            pooled.append(clustering.masked_mean_feature(item.features, mask))
    if len(pooled) < k:
        raise ValueError(f"only {len(pooled)} images usable for clustering, need k={k}")
    pooled = np.array(pooled)
    model = clustering.kmeans(pooled, k, seed, ids=pooled_ids)
    class_of = clustering.assign_cluster_classes(model, class_space, mode)
    dist_of = {}
    for row, image_id in enumerate(pooled_ids):
        centroid = model.centroids[model.assignments[image_id]]
        dist_of[image_id] = float(np.sqrt(((pooled[row] - centroid) ** 2).sum()))
    records = []
    for item in novel.items:
        base_lab, mask, count = per_image[item.image_id]
        if item.image_id in class_of:
            fused = fuse_labels(base_lab, mask, class_of[item.image_id], class_space)
            cluster_id = model.assignments[item.image_id]
            dist = dist_of[item.image_id]
        else:
            fused, cluster_id, dist = None, None, float("nan")
        records.append(PseudoLabelRecord(item.image_id, base_lab, mask, fused,
                                         cluster_id, count, dist))
    return records, model


def write_pseudo_labels(records, path) -> None:
    """Persist fused labels + masks as binary records with a text sidecar."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    sidecar = {"version": dataio.FORMAT_VERSION, "items": []}
    for rec in records:
        h, w = rec.base_labels.shape
        sidecar["items"].append({
            "image_id": rec.image_id,
            "height": h,
            "width": w,
            "cluster_id": rec.cluster_id,
            "novel_pixels": rec.novel_pixels,
            "distance": None if math.isnan(rec.distance) else rec.distance,
        })
        empty = np.zeros((h, w, 0), dtype=np.float32)
        labels = rec.fused if rec.fused is not None else rec.base_labels
        dataio.write_record(root / f"{rec.image_id}.ncds", empty, labels, rec.novel_mask)
    with open(root / "pseudo_labels.json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(root / "clusters.tsv", "w") as fh:
        fh.write("image_id\tcluster_id\tnovel_pixels\tdistance\n")
        for rec in records:
            cluster = "-" if rec.cluster_id is None else str(rec.cluster_id)
            dist = "-" if math.isnan(rec.distance) else repr(rec.distance)
            fh.write(f"{rec.image_id}\t{cluster}\t{rec.novel_pixels}\t{dist}\n")


def read_pseudo_labels(path) -> list[PseudoLabelRecord]:
    root = Path(path)
    sidecar_path = root / "pseudo_labels.json"
    if not sidecar_path.is_file():
        raise dataio.DataFormatError(f"missing pseudo-label sidecar: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("version") != dataio.FORMAT_VERSION:
        raise dataio.DataFormatError("pseudo-label store version unsupported")
    records = []
    for entry in sidecar["items"]:
        _, labels, mask = dataio.read_record(
            root / f"{entry['image_id']}.ncds", True, True,
            expect_shape=(entry["height"], entry["width"], 0))
        cluster_id = entry["cluster_id"]
        if cluster_id is None:
            fused, base_lab = None, labels
        else:
            fused = labels
            base_lab = labels.copy()
            base_lab[mask == 1] = 0
        dist = entry["distance"]
        records.append(PseudoLabelRecord(entry["image_id"], base_lab, mask, fused,
                                         cluster_id, entry["novel_pixels"],
                                         float("nan") if dist is None else dist))
    return records
