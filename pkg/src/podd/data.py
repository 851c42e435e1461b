"""Datasets: synthetic generation, binary ingestion, batch iteration.

The synthetic family provides a desk-scale classification task with a
controllable difficulty knob: each class is a random template and samples
are noisy copies, so class separation is set by the template spread
against the noise floor.

Real data enters through a documented binary record format, one label
byte followed by channel-planar pixel bytes, so 32x32-style datasets can
be dropped in without converters.
"""

from __future__ import annotations

import os
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from .geometry import DatasetMeta
from .ordering import EmbeddingSet
from .seeding import derive_seed

__all__ = [
    "LabeledDataset",
    "SyntheticSpec",
    "class_templates",
    "generate_synthetic",
    "load_binary_dataset",
    "save_binary_dataset",
    "batch_iterator",
    "class_mean_embeddings",
]


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image-classification split.

    images: (m, h, w, c) float64 in [0, 1]; labels: (m,) int64 class ids.
    """

    images: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta
    split: str = "train"

    def __post_init__(self) -> None:
        img, lab = self.images, self.labels
        if img.ndim != 4:
            raise ValueError(f"images must be 4-D, got shape {img.shape}")
        m, h, w, c = img.shape
        if m < 1:
            raise ValueError("dataset is empty")
        if (h, w, c) != (self.meta.image_h, self.meta.image_w, self.meta.channels):
            raise ValueError(
                f"images are {h}x{w}x{c} but meta declares "
                f"{self.meta.image_h}x{self.meta.image_w}x{self.meta.channels}"
            )
        if img.dtype != np.float64:
            raise ValueError(f"images must be float64, got {img.dtype}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if lab.shape != (m,):
            raise ValueError(f"labels shape {lab.shape} does not match {m} images")
        if lab.dtype != np.int64:
            raise ValueError(f"labels must be int64, got {lab.dtype}")
        if lab.min() < 0 or lab.max() >= self.meta.n_classes:
            raise ValueError(f"labels must lie in [0, {self.meta.n_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def n_samples(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the template-plus-noise dataset family.

    signal scales the per-pixel template spread around mid-gray; noise is
    the per-sample Gaussian sigma.  Larger signal/noise ratio means an
    easier task.
    """

    n_classes: int = 4
    image_h: int = 16
    image_w: int = 16
    channels: int = 3
    per_class: int = 256
    test_per_class: int = 64
    signal: float = 0.10
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.image_h, self.image_w, self.channels) < 1:
            raise ValueError("image dimensions must be positive")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class sample counts must be positive")
        if self.signal <= 0:
            raise ValueError("signal must be positive, classes would be inseparable")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def meta(self) -> DatasetMeta:
        return DatasetMeta(
            n_classes=self.n_classes,
            image_h=self.image_h,
            image_w=self.image_w,
            channels=self.channels,
        )


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Per-class templates, (n, h, w, c): mid-gray plus seeded spread, clipped."""
    shape = (spec.image_h, spec.image_w, spec.channels)
    templates = np.empty((spec.n_classes, *shape), dtype=np.float64)
    for k in range(spec.n_classes):
        rng = np.random.default_rng(derive_seed(spec.seed, "template", k))
        templates[k] = np.clip(0.5 + spec.signal * rng.standard_normal(shape), 0.0, 1.0)
    return templates


def _noisy_split(
    spec: SyntheticSpec, templates: np.ndarray, per_class: int, split: str
) -> LabeledDataset:
    shape = (spec.image_h, spec.image_w, spec.channels)
    images = np.empty((spec.n_classes * per_class, *shape), dtype=np.float64)
    labels = np.empty(spec.n_classes * per_class, dtype=np.int64)
    for k in range(spec.n_classes):
        rng = np.random.default_rng(derive_seed(spec.seed, split, k))
        noise = spec.noise * rng.standard_normal((per_class, *shape))
        sl = slice(k * per_class, (k + 1) * per_class)
        images[sl] = np.clip(templates[k] + noise, 0.0, 1.0)
        labels[sl] = k
    return LabeledDataset(images=images, labels=labels, meta=spec.meta, split=split)


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic (train, test) pair; splits draw from disjoint noise streams."""
    templates = class_templates(spec)
    train = _noisy_split(spec, templates, spec.per_class, "train")
    test = _noisy_split(spec, templates, spec.test_per_class, "test")
    return train, test


def _record_length(meta: DatasetMeta) -> int:
    return 1 + meta.image_h * meta.image_w * meta.channels


def load_binary_dataset(path: str | os.PathLike, meta: DatasetMeta, split: str = "train") -> LabeledDataset:
    """Read the one-label-byte, channel-planar record format.

    Pixels are scaled to [0, 1] by dividing by 255; record order is kept.
    """
    with open(path, "rb") as f:
        raw = f.read()
    rec = _record_length(meta)
    m, leftover = divmod(len(raw), rec)
    if leftover:
        raise ValueError(
            f"{path}: truncated record at byte offset {m * rec} "
            f"({leftover} trailing bytes, record length {rec})"
        )
    if m == 0:
        raise ValueError(f"{path}: no records (record length {rec})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(m, rec)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= meta.n_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{path}: record {i} at byte offset {i * rec} has label "
            f"{labels[i]} outside [0, {meta.n_classes})"
        )
    planar = records[:, 1:].reshape(m, meta.channels, meta.image_h, meta.image_w)
    images = planar.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return LabeledDataset(images=images, labels=labels, meta=meta, split=split)


def save_binary_dataset(dataset: LabeledDataset, path: str | os.PathLike) -> None:
    """Write the record format load_binary_dataset reads; pixels round to bytes."""
    m = dataset.n_samples
    planar = dataset.images.transpose(0, 3, 1, 2)
    pixel_bytes = np.clip(np.rint(planar * 255.0), 0, 255).astype(np.uint8).reshape(m, -1)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixel_bytes], axis=1
    )
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(records.tobytes())
    os.replace(tmp, path)


def batch_iterator(
    dataset: LabeledDataset, batch_size: int, seed: int, epochs: int = 1
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) minibatches, reshuffling every epoch.

    Each epoch visits every sample exactly once; a short final batch is
    yielded rather than dropped.
    """
    m = dataset.n_samples
    if not 1 <= batch_size <= m:
        raise ValueError(f"batch_size must be in [1, {m}], got {batch_size}")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(m)
        for start in range(0, m, batch_size):
            idx = perm[start : start + batch_size]
            yield dataset.images[idx], dataset.labels[idx]


def class_mean_embeddings(dataset: LabeledDataset) -> EmbeddingSet:
    """Flattened per-class mean images, the default placement embedding."""
    n = dataset.meta.n_classes
    dim = dataset.meta.image_h * dataset.meta.image_w * dataset.meta.channels
    vectors = np.empty((n, dim), dtype=np.float64)
    for k in range(n):
        mask = dataset.labels == k
        if not mask.any():
            raise ValueError(f"class {k} has no samples to embed")
        vectors[k] = dataset.images[mask].reshape(mask.sum(), dim).mean(axis=0)
    return EmbeddingSet(names=dataset.meta.class_names, vectors=vectors)
