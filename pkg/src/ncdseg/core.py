"""Shared data model: class spaces, per-pixel tensors and datasets.

All map-like data is held in plain numpy arrays:

* feature maps   -- float32, shape (H, W, D)
* label maps     -- uint8,   shape (H, W), 255 reserved as ignore
* saliency masks -- uint8,   shape (H, W), values in {0, 1}
* probability maps -- float, shape (H, W, C), rows on the simplex

Everything here is immutable by convention; functions never mutate their
inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Sentinel label excluded from every loss and metric.
IGNORE_ID = 255


@dataclass(frozen=True)
class ClassSpace:
    """Layout of class ids.

    Background is id 0 and counts as a base class. Base ids occupy
    [0, n_base); novel output channels occupy [n_base, n_base +
    novel_head_size). ``novel_head_size`` equals ``n_novel`` for exact
    clustering and the cluster count for over-clustering.
    """

    n_base: int
    n_novel: int
    novel_head_size: int = 0  # 0 -> defaults to n_novel

    def __post_init__(self):
        if self.n_base < 1:
            raise ValueError(f"n_base must be >= 1, got {self.n_base}")
        if self.n_novel < 1:
            raise ValueError(f"n_novel must be >= 1, got {self.n_novel}")
        if self.novel_head_size == 0:
            object.__setattr__(self, "novel_head_size", self.n_novel)
        if self.novel_head_size < 1:
            raise ValueError("novel_head_size must be >= 1")
        if self.n_base + self.novel_head_size > IGNORE_ID:
            raise ValueError("class ids would collide with the ignore id")

    @property
    def n_total(self) -> int:
        """Number of true classes (base incl. background + novel)."""
        return self.n_base + self.n_novel

    @property
    def head_total(self) -> int:
        """Number of output channels of the novel-stage model."""
        return self.n_base + self.novel_head_size

    def novel_class_ids(self) -> range:
        return range(self.n_base, self.n_base + self.n_novel)

    def novel_channel_ids(self) -> range:
        return range(self.n_base, self.n_base + self.novel_head_size)


def as_feature_map(values) -> np.ndarray:
    """Validate and return an (H, W, D) float32 feature map."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"feature map must be (H, W, D) with all dims >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    return arr


def as_label_map(values, max_classes: int | None = None) -> np.ndarray:
    """Validate and return an (H, W) uint8 label map.

    ``max_classes`` bounds non-ignore ids (exclusive); the ignore id is
    always allowed.
    """
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"label map must be 2-d, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("label values outside uint8 range")
        arr = arr.astype(np.uint8)
    if max_classes is not None:
        bad = (arr != IGNORE_ID) & (arr >= max_classes)
        if np.any(bad):
            raise ValueError(f"label ids >= {max_classes} present (and not ignore)")
    return arr


def as_saliency_mask(values) -> np.ndarray:
    """Validate and return an (H, W) uint8 binary mask."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"saliency mask must be 2-d, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("saliency mask values must be 0 or 1")
    return arr


def as_prob_map(values, atol: float = 1e-6) -> np.ndarray:
    """Validate an (H, W, C) probability map: nonnegative, rows sum to 1."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"probability map must be (H, W, C), got shape {arr.shape}")
    if np.any(arr < -atol):
        raise ValueError("probability map has negative entries")
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
        raise ValueError("probability rows do not sum to 1")
    return arr


def argmax_class(prob: np.ndarray, pixel: tuple[int, int]) -> int:
    """Class id of the maximal channel at ``pixel``; ties go to the lowest id."""
    h, w = pixel
    if not (0 <= h < prob.shape[0] and 0 <= w < prob.shape[1]):
        raise ValueError(f"pixel {pixel} out of bounds for {prob.shape[:2]}")
    return int(np.argmax(prob[h, w]))


def argmax_map(prob: np.ndarray) -> np.ndarray:
    """Per-pixel argmax labels (uint8); ties go to the lowest id."""
    return np.argmax(prob, axis=-1).astype(np.uint8)


@dataclass
class DatasetItem:
    image_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    saliency: np.ndarray | None = None

    def validate(self, class_space: ClassSpace | None = None) -> None:
        self.features = as_feature_map(self.features)
        h, w = self.features.shape[:2]
        if self.labels is not None:
            max_classes = class_space.head_total if class_space else None
            self.labels = as_label_map(self.labels, max_classes)
            if self.labels.shape != (h, w):
                raise ValueError(f"{self.image_id}: label shape {self.labels.shape} != features {(h, w)}")
        if self.saliency is not None:
            self.saliency = as_saliency_mask(self.saliency)
            if self.saliency.shape != (h, w):
                raise ValueError(f"{self.image_id}: saliency shape {self.saliency.shape} != features {(h, w)}")


SPLIT_TAGS = ("base", "novel", "val")


@dataclass
class Dataset:
    items: list[DatasetItem] = field(default_factory=list)
    split_tag: str = "base"
    class_space: ClassSpace = field(default_factory=lambda: ClassSpace(1, 1))

    def validate(self) -> None:
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split_tag {self.split_tag!r}")
        seen = set()
        for item in self.items:
            if item.image_id in seen:
                raise ValueError(f"duplicate image_id {item.image_id!r}")
            seen.add(item.image_id)
            item.validate(self.class_space)
            if self.split_tag == "base" and item.labels is None:
                raise ValueError(f"base-split item {item.image_id!r} has no labels")
            if self.split_tag == "novel" and item.saliency is None:
                raise ValueError(f"novel-split item {item.image_id!r} has no saliency mask")

    def ids(self) -> list[str]:
        return [item.image_id for item in self.items]

    def item_map(self) -> dict[str, DatasetItem]:
        return {item.image_id: item for item in self.items}

    def by_id(self, image_id: str) -> DatasetItem:
        for item in self.items:
            if item.image_id == image_id:
                return item
        raise KeyError(image_id)
