"""Synthetic desk-scale benchmark generator.

Scenes are grids of rectangle/ellipse objects over a background; every
pixel's feature vector is its class prototype plus isotropic gaussian
noise, so clustering difficulty is controlled by the prototype-distance
to sigma ratio. Saliency masks are derived from the true labels and then
corrupted (object drops, boundary jitter, pixel flips) to emulate an
imperfect saliency estimator. A configurable fraction of unlabeled-pool
scenes also carries a salient clutter region: background pixels whose
features grade toward a foreground prototype. Those pixels collect
spurious pseudo-labels and stay intrinsically uncertain, emulating the
hard images that saliency-driven pseudo-labeling mislabels.

All generation is a pure function of (specs, seed).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ClassSpace, Dataset, DatasetItem


@dataclass(frozen=True, eq=False)
class SceneSpec:
    prototypes: np.ndarray            # (n_classes, D), row 0 = background
    height: int = 32
    width: int = 32
    sigma: float = 0.5                # per-pixel feature noise
    objects_min: int = 1
    objects_max: int = 3
    object_classes: tuple[int, ...] | None = None   # eligible foreground classes; None -> all
    require_classes: tuple[int, ...] | None = None  # at least one object from this set
    max_required: int | None = None                 # cap on objects drawn from require_classes
    min_object_frac: float = 0.2
    max_object_frac: float = 0.5
    class_skew: float = 1.0           # geometric class imbalance; weight(id) ~ skew**-rank
    clutter_rate: float = 0.0         # fraction of scenes with a salient clutter region
    clutter_mix: float = 1.0          # max per-pixel blend weight toward the mimicked class

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] < 2:
            raise ValueError("prototypes must be (n_classes >= 2, D)")
        diffs = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ValueError("prototypes must be pairwise distinct")
        object.__setattr__(self, "prototypes", protos)
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ValueError("need 1 <= objects_min <= objects_max")
        if self.height < 4 or self.width < 4:
            raise ValueError("grid too small")
        if not 0.0 < self.min_object_frac <= self.max_object_frac <= 1.0:
            raise ValueError("need 0 < min_object_frac <= max_object_frac <= 1")
        if self.class_skew <= 0:
            raise ValueError("class_skew must be > 0")
        if not 0.0 <= self.clutter_rate <= 1.0:
            raise ValueError("clutter_rate must be in [0, 1]")
        if not 0.0 <= self.clutter_mix <= 1.0:
            raise ValueError("clutter_mix must be in [0, 1]")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class SaliencyNoiseSpec:
    boundary_erode_dilate: int = 0    # max morphological jitter radius (pixels)
    flip_rate: float = 0.0            # per-pixel flip probability
    miss_rate: float = 0.0            # per-object drop probability

    def __post_init__(self):
        for name in ("flip_rate", "miss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.boundary_erode_dilate < 0:
            raise ValueError("boundary_erode_dilate must be >= 0")


@dataclass(frozen=True)
class FoldSpec:
    n_base_fg: int = 2                # foreground base classes (background excluded)
    n_novel: int = 5
    n_base_images: int = 100
    n_novel_images: int = 100
    n_val_images: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_base_fg < 1 or self.n_novel < 1:
            raise ValueError("need at least one base foreground and one novel class")
        if min(self.n_base_images, self.n_novel_images, self.n_val_images) < 1:
            raise ValueError("every split needs at least one image")


def make_prototypes(n_classes: int, dim: int, scale: float = 3.0, seed: int = 0,
                    style: str = "orthogonal", pair_gap: float = 1.0) -> np.ndarray:
    """Deterministic class prototypes.

    ``orthogonal`` places classes on scaled orthonormal directions
    (pairwise distance scale*sqrt(2); requires n_classes <= dim), which
    keeps zero-noise scenes exactly linearly separable. ``gaussian``
    draws unconstrained random prototypes.

    ``pair_gap`` < 1 moves the last prototype toward the second-to-last
    by that factor, making the two highest class ids a confusable pair
    while leaving every other pairwise distance untouched.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    if style == "orthogonal":
        if n_classes > dim:
            raise ValueError(f"orthogonal prototypes need n_classes <= dim ({n_classes} > {dim})")
        a = rng.normal(size=(dim, dim))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
        protos = scale * q[:n_classes].copy()
    elif style == "gaussian":
        protos = scale * rng.normal(size=(n_classes, dim)) / np.sqrt(dim)
    else:
        raise ValueError(f"unknown prototype style {style!r}")
    if not 0.0 < pair_gap <= 1.0:
        raise ValueError("pair_gap must be in (0, 1]")
    if pair_gap < 1.0:
        if n_classes < 2:
            raise ValueError("pair_gap needs at least two classes")
        protos[-1] = protos[-2] + pair_gap * (protos[-1] - protos[-2])
    return protos


def _draw_object_classes(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    pool = np.array(spec.object_classes if spec.object_classes is not None
                    else range(1, spec.n_classes), dtype=np.int64)
    # geometric frequency falloff by class id rank; skew 1 = uniform
    weights = spec.class_skew ** -np.argsort(np.argsort(pool)).astype(np.float64)
    weights /= weights.sum()
    required = set(spec.require_classes or ())
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(1000):
        classes = rng.choice(pool, size=n_obj, replace=True, p=weights)
        n_req = sum(1 for c in classes if int(c) in required)
        if required and n_req == 0:
            continue
        if spec.max_required is not None and n_req > spec.max_required:
            continue
        return classes
    raise RuntimeError("could not satisfy object-class constraints after 1000 draws")


def _paint_object(rng: np.random.Generator, canvas: np.ndarray, value: int,
                  spec: SceneSpec, frac_range: tuple[float, float] | None = None) -> None:
    h, w = canvas.shape
    lo, hi = frac_range if frac_range is not None else (spec.min_object_frac, spec.max_object_frac)
    oh = max(2, int(round(h * rng.uniform(lo, hi))))
    ow = max(2, int(round(w * rng.uniform(lo, hi))))
    oh, ow = min(oh, h), min(ow, w)
    top = int(rng.integers(0, h - oh + 1))
    left = int(rng.integers(0, w - ow + 1))
    shape = "rect" if rng.random() < 0.5 else "ellipse"
    if shape == "rect":
        canvas[top:top + oh, left:left + ow] = value
    else:
        cy, cx = top + (oh - 1) / 2.0, left + (ow - 1) / 2.0
        ry, rx = oh / 2.0, ow / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        canvas[inside] = value


def _generate_scene_full(spec: SceneSpec, seed: int):
    """Scene plus its clutter mask; see generate_scene."""
    rng = np.random.default_rng(seed)
    classes = _draw_object_classes(rng, spec)
    owner = np.zeros((spec.height, spec.width), dtype=np.int64)
    for i in range(len(classes)):
        _paint_object(rng, owner, i + 1, spec)
    class_of = np.concatenate(([0], classes)).astype(np.uint8)
    labels = class_of[owner]
    mean_map = spec.prototypes[labels]
    clutter = np.zeros(labels.shape, dtype=bool)
    if spec.clutter_rate > 0.0 and rng.random() < spec.clutter_rate:
        region = np.zeros(labels.shape, dtype=np.int64)
        # clutter patches sit at the top of the object size range so they
        # dominate the salient area of the scenes they land in
        top = (spec.max_object_frac, min(2.0 * spec.max_object_frac, 0.9))
        _paint_object(rng, region, 1, spec, frac_range=top)
        clutter = (region == 1) & (labels == 0)
        if clutter.any():
            pool = spec.require_classes if spec.require_classes else spec.object_classes
            fg = np.array(pool if pool is not None else range(1, spec.n_classes),
                          dtype=np.int64)
            target = int(rng.choice(fg))
            u = rng.uniform(0.0, spec.clutter_mix, size=(int(clutter.sum()), 1))
            mean_map[clutter] = ((1.0 - u) * spec.prototypes[0]
                                 + u * spec.prototypes[target])
    features = mean_map + rng.normal(0.0, spec.sigma, size=(spec.height, spec.width, spec.feature_dim))
    return features.astype(np.float32), labels, clutter


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One random scene: (features float32 (H,W,D), labels uint8 (H,W)).

    Later objects overwrite earlier ones. With probability
    ``clutter_rate`` the scene also contains a clutter region: a
    background patch whose pixel features are per-pixel blends of the
    background prototype and one random foreground prototype (blend
    weights uniform in [0, clutter_mix]). Clutter emulates distractors
    that a saliency model fires on: it stays background in the label
    map, but its feature gradient straddles the background/foreground
    decision boundary, so part of its pixels stay uncertain no matter
    how long a linear model trains.
    """
    features, labels, _ = _generate_scene_full(spec, seed)
    return features, labels


def generate_saliency(labels: np.ndarray, noise: SaliencyNoiseSpec, seed: int) -> np.ndarray:
    """Corrupted foreground mask for a label map.

    Objects (connected components per class) survive with probability
    1 - miss_rate; the surviving mask is then eroded or dilated by a
    random radius up to ``boundary_erode_dilate`` and pixels are flipped
    with ``flip_rate``. With a zero noise spec the output equals the
    foreground indicator exactly.
    """
    rng = np.random.default_rng(seed)
    mask = np.zeros(labels.shape, dtype=bool)
    for cls in np.unique(labels):
        if cls == 0:
            continue
        comps, n_comps = ndimage.label(labels == cls)
        for j in range(1, n_comps + 1):
            if rng.random() >= noise.miss_rate:
                mask |= comps == j
    if noise.boundary_erode_dilate > 0:
        radius = int(rng.integers(0, noise.boundary_erode_dilate + 1))
        if radius > 0:
            if rng.random() < 0.5:
                mask = ndimage.binary_erosion(mask, iterations=radius)
            else:
                mask = ndimage.binary_dilation(mask, iterations=radius)
    if noise.flip_rate > 0.0:
        flips = rng.random(labels.shape) < noise.flip_rate
        mask = mask ^ flips
    return mask.astype(np.uint8)


def _image_seed(fold_seed: int, split_code: int, index: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([fold_seed, split_code, index, stream]).generate_state(1)[0])


def make_fold_benchmark(scene: SceneSpec, fold: FoldSpec,
                        noise: SaliencyNoiseSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Generate the (base, novel, val) splits of one fold.

    Class layout: background 0, base foreground 1..n_base_fg, novel
    classes n_base..n_base+n_novel-1. Base-split scenes draw objects
    from the base classes only; any novel pixel that slips in is
    relabeled as background before training. Novel split items carry
    corrupted saliency plus hidden ground truth used only by the
    evaluator. Clutter regions appear in the novel and val splits (both
    sample the deployment scene distribution); base scenes are always
    drawn clean.
    """
    n_classes = 1 + fold.n_base_fg + fold.n_novel
    if scene.n_classes != n_classes:
        raise ValueError(f"scene has {scene.n_classes} prototypes, fold needs {n_classes}")
    cs = ClassSpace(n_base=1 + fold.n_base_fg, n_novel=fold.n_novel)
    base_ids = tuple(range(1, cs.n_base))
    novel_ids = tuple(range(cs.n_base, cs.n_base + fold.n_novel))

    # the max_required budget caps novel objects; it has no meaning when
    # the required set is the base classes
    base_spec = dataclasses.replace(scene, object_classes=base_ids,
                                    require_classes=base_ids, max_required=None,
                                    clutter_rate=0.0)
    novel_spec = dataclasses.replace(scene, require_classes=novel_ids)
    val_spec = dataclasses.replace(scene, require_classes=novel_ids)

    def build(split_tag, split_code, spec, count, with_saliency, relabel_novel):
        items = []
        for i in range(count):
            features, labels, clutter = _generate_scene_full(
                spec, _image_seed(fold.seed, split_code, i))
            saliency = None
            if with_saliency:
                saliency = generate_saliency(labels, noise, _image_seed(fold.seed, split_code, i, stream=1))
                # the saliency estimator fires on clutter: false positives
                # on top of the label-derived mask
                saliency = (saliency.astype(bool) | clutter).astype(np.uint8)
            if relabel_novel:
                labels = labels.copy()
                labels[labels >= cs.n_base] = 0
            items.append(DatasetItem(f"{split_tag}_{i:04d}", features, labels, saliency))
        return Dataset(items=items, split_tag=split_tag, class_space=cs)

    base = build("base", 1, base_spec, fold.n_base_images, False, True)
    novel = build("novel", 2, novel_spec, fold.n_novel_images, True, False)
    val = build("val", 3, val_spec, fold.n_val_images, False, False)
    return base, novel, val
