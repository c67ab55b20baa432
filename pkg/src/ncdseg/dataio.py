"""Bit-exact dataset and checkpoint file formats.

Dataset directory layout:

* ``manifest.json`` -- split tag, class-space counts, per-item shapes and
  optional-payload flags.
* one ``<image_id>.ncds`` record per item: little-endian header
  (magic ``NCDS``, u32 version=1, u32 H, u32 W, u32 D), then row-major
  float32 features, then the optional uint8 label plane, then the
  optional uint8 saliency plane.

Model checkpoints use the same style: magic ``NCDM``, u32 version=1,
u32 C, u32 D, float32 weights row-major, float32 bias.
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .core import ClassSpace, Dataset, DatasetItem

RECORD_MAGIC = b"NCDS"
MODEL_MAGIC = b"NCDM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MODEL_HEADER = struct.Struct("<4sIII")

_ID_RE = re.compile(r"[A-Za-z0-9_\-]+")


class DataFormatError(Exception):
    """Raised for missing, corrupt or version-incompatible files."""


def _check_image_id(image_id: str) -> None:
    if not _ID_RE.fullmatch(image_id):
        raise ValueError(f"image_id {image_id!r} is not filesystem-safe")


def write_record(path: Path, features: np.ndarray, labels: np.ndarray | None,
                 saliency: np.ndarray | None) -> None:
    """Write one binary record. ``features`` may have D=0 (label-only record)."""
    h, w, d = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RECORD_MAGIC, FORMAT_VERSION, h, w, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
        if saliency is not None:
            fh.write(np.ascontiguousarray(saliency, dtype=np.uint8).tobytes())


def read_record(path: Path, has_label: bool, has_saliency: bool,
                expect_shape: tuple[int, int, int] | None = None):
    """Read one binary record; returns (features, labels, saliency)."""
    name = path.stem
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"record for {name!r} unreadable: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"record for {name!r} truncated (no header)")
    magic, version, h, w, d = _HEADER.unpack_from(blob)
    if magic != RECORD_MAGIC:
        raise DataFormatError(f"record for {name!r} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"record for {name!r} has version {version}, expected {FORMAT_VERSION}")
    if expect_shape is not None and (h, w, d) != expect_shape:
        raise DataFormatError(f"record for {name!r} shape {(h, w, d)} does not match manifest {expect_shape}")
    expected = _HEADER.size + 4 * h * w * d + h * w * (int(has_label) + int(has_saliency))
    if len(blob) != expected:
        raise DataFormatError(f"record for {name!r} has {len(blob)} bytes, expected {expected}")
    off = _HEADER.size
    features = np.frombuffer(blob, dtype="<f4", count=h * w * d, offset=off).reshape(h, w, d).copy()
    off += 4 * h * w * d
    labels = saliency = None
    if has_label:
        labels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
        off += h * w
    if has_saliency:
        saliency = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
    return features, labels, saliency


def write_dataset(dataset: Dataset, path) -> None:
    """Write manifest plus one record per item; validates before any write."""
    dataset.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in dataset.items:
        _check_image_id(item.image_id)
        h, w, d = item.features.shape
        entries.append({
            "image_id": item.image_id,
            "height": h,
            "width": w,
            "dim": d,
            "has_label": item.labels is not None,
            "has_saliency": item.saliency is not None,
        })
    manifest = {
        "format": "ncdseg-dataset",
        "version": FORMAT_VERSION,
        "split_tag": dataset.split_tag,
        "class_space": {
            "n_base": dataset.class_space.n_base,
            "n_novel": dataset.class_space.n_novel,
            "novel_head_size": dataset.class_space.novel_head_size,
        },
        "items": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for item in dataset.items:
        write_record(root / f"{item.image_id}.ncds", item.features, item.labels, item.saliency)


def read_dataset(path) -> Dataset:
    """Read a dataset directory written by :func:`write_dataset`."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataFormatError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"manifest version {manifest.get('version')} unsupported, expected {FORMAT_VERSION}")
    cs = manifest["class_space"]
    class_space = ClassSpace(cs["n_base"], cs["n_novel"], cs["novel_head_size"])
    items = []
    for entry in manifest["items"]:
        features, labels, saliency = read_record(
            root / f"{entry['image_id']}.ncds",
            entry["has_label"], entry["has_saliency"],
            expect_shape=(entry["height"], entry["width"], entry["dim"]),
        )
        items.append(DatasetItem(entry["image_id"], features, labels, saliency))
    dataset = Dataset(items=items, split_tag=manifest["split_tag"], class_space=class_space)
    dataset.validate()
    return dataset


def save_model(path, weights: np.ndarray, bias: np.ndarray) -> None:
    """Write a linear-segmenter checkpoint (float32 payload)."""
    c, d = weights.shape
    if bias.shape != (c,):
        raise ValueError(f"bias shape {bias.shape} inconsistent with weights {weights.shape}")
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, c, d))
        fh.write(np.ascontiguousarray(weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())


def load_model(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a checkpoint; returns (weights, bias) as float64 arrays."""
    blob = Path(path).read_bytes()
    if len(blob) < _MODEL_HEADER.size:
        raise DataFormatError(f"checkpoint {path} truncated")
    magic, version, c, d = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise DataFormatError(f"checkpoint {path} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"checkpoint {path} has version {version}, expected {FORMAT_VERSION}")
    expected = _MODEL_HEADER.size + 4 * (c * d + c)
    if len(blob) != expected:
        raise DataFormatError(f"checkpoint {path} has {len(blob)} bytes, expected {expected}")
    weights = np.frombuffer(blob, dtype="<f4", count=c * d, offset=_MODEL_HEADER.size)
    bias = np.frombuffer(blob, dtype="<f4", count=c, offset=_MODEL_HEADER.size + 4 * c * d)
    return weights.reshape(c, d).astype(np.float64), bias.astype(np.float64)
