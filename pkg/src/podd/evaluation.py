"""Downstream evaluation protocol and reference baselines.

A poster is only as good as the classifiers it trains: evaluation expands
the poster into (patch, soft label) pairs, trains several freshly seeded
networks on them, and reports mean and spread of test accuracy.  The
baselines bracket the result from below: an unoptimized Gaussian poster
with territory labels, and an equal-pixel random subset of real images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import LabeledDataset
from .distillation import expand
from .geometry import DatasetMeta, ExtractionSpec, Poster, init_poster, pixel_budget, poster_dims
from .labeling import init_label_tensor
from .models import ConvNetSpec, forward, to_nchw, train_params
from .ordering import ClassOrder
from .seeding import derive_seed

__all__ = [
    "EvalProtocol",
    "EvalResult",
    "evaluate_training_set",
    "evaluate_poster",
    "evaluate_real_images",
    "baseline_random_coreset",
    "baseline_noise_poster",
    "identity_order",
    "coreset_budget",
]


@dataclass(frozen=True)
class EvalProtocol:
    """Downstream training recipe, fixed so runs are comparable."""

    n_models: int = 8
    train_budget: int = 500
    learning_rate: float = 0.01
    batch_size: int = 256
    depth: int = 3
    width: int = 128
    seed: int = 0
    plateau_patience: int | None = None

    def __post_init__(self) -> None:
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.train_budget < 1:
            raise ValueError("train_budget must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    per_model: tuple[float, ...]


def _accuracy(
    params: dict[str, torch.Tensor],
    spec: ConvNetSpec,
    test_set: LabeledDataset,
    chunk: int = 512,
) -> float:
    hits = 0
    images, labels = test_set.images, test_set.labels
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            x = to_nchw(torch.from_numpy(images[start : start + chunk]).to(torch.float32))
            pred = forward(params, x, spec).argmax(dim=1).numpy()
            hits += int((pred == labels[start : start + chunk]).sum())
    return hits / images.shape[0]


def evaluate_training_set(
    images: torch.Tensor,
    soft_labels: torch.Tensor,
    test_set: LabeledDataset,
    protocol: EvalProtocol,
) -> EvalResult:
    """Train protocol.n_models fresh nets on (images, soft_labels), score each.

    ``images`` is channel-last (m, h, w, c).  Per-model seeds depend only
    on the slot index, so results are independent of execution order and
    a longer run reproduces a shorter run's prefix exactly.
    """
    m, h, w, c = images.shape
    if soft_labels.shape[0] != m:
        raise ValueError(f"{soft_labels.shape[0]} label rows for {m} images")
    spec = ConvNetSpec(
        depth=protocol.depth,
        width=protocol.width,
        n_classes=soft_labels.shape[1],
        in_channels=c,
        image_h=h,
        image_w=w,
    )
    x = to_nchw(images.detach().to(torch.float32))
    y = soft_labels.detach().to(torch.float32)
    accs = []
    for slot in range(protocol.n_models):
        params = train_params(
            spec,
            x,
            y,
            steps=protocol.train_budget,
            lr=protocol.learning_rate,
            batch_size=protocol.batch_size,
            init_seed=derive_seed(protocol.seed, "eval-init", slot),
            batch_seed=derive_seed(protocol.seed, "eval-batches", slot),
            plateau_patience=protocol.plateau_patience,
        )
        accs.append(_accuracy(params, spec, test_set))
    per_model = tuple(accs)
    mean = float(np.mean(per_model))
    std = float(np.std(per_model, ddof=1)) if protocol.n_models > 1 else 0.0
    return EvalResult(mean=mean, std=std, per_model=per_model)


def evaluate_poster(
    poster: Poster | torch.Tensor,
    label_tensor: torch.Tensor,
    spec: ExtractionSpec,
    label_mode: str,
    test_set: LabeledDataset,
    protocol: EvalProtocol,
) -> EvalResult:
    """Expand the poster under the labeling mode and run the training protocol."""
    patches, labels = expand(poster, label_tensor, spec, label_mode)
    return evaluate_training_set(patches, labels, test_set, protocol)


def evaluate_real_images(
    dataset: LabeledDataset,
    test_set: LabeledDataset,
    protocol: EvalProtocol,
) -> EvalResult:
    """Protocol run on real images with one-hot labels (coreset and full-data rows)."""
    n = dataset.meta.n_classes
    one_hot = np.zeros((dataset.n_samples, n), dtype=np.float64)
    one_hot[np.arange(dataset.n_samples), dataset.labels] = 1.0
    return evaluate_training_set(
        torch.from_numpy(dataset.images),
        torch.from_numpy(one_hot),
        test_set,
        protocol,
    )


def baseline_random_coreset(
    dataset: LabeledDataset,
    ipc_equivalent_pixels: int,
    seed: int,
) -> LabeledDataset:
    """Random real-image subset matching the poster's pixel budget.

    Selection is class-balanced as far as divisibility allows: every class
    gets floor(k/n) images, the remainder goes to classes drawn without
    replacement.
    """
    meta = dataset.meta
    per_image = meta.image_h * meta.image_w
    k = ipc_equivalent_pixels // per_image
    if k < 1:
        raise ValueError(
            f"budget {ipc_equivalent_pixels} px is below one {meta.image_h}x{meta.image_w} image"
        )
    k = min(k, dataset.n_samples)
    n = meta.n_classes
    rng = np.random.default_rng(seed)
    counts = np.full(n, k // n, dtype=np.int64)
    extra = rng.choice(n, size=k % n, replace=False)
    counts[extra] += 1
    chosen: list[np.ndarray] = []
    for klass in range(n):
        pool = np.nonzero(dataset.labels == klass)[0]
        want = int(counts[klass])
        if want > pool.size:
            raise ValueError(f"class {klass} has {pool.size} samples, needs {want}")
        if want:
            chosen.append(rng.choice(pool, size=want, replace=False))
    idx = np.sort(np.concatenate(chosen))
    return LabeledDataset(
        images=dataset.images[idx].copy(),
        labels=dataset.labels[idx].copy(),
        meta=meta,
        split=dataset.split,
    )


def identity_order(meta: DatasetMeta, rows: int, cols: int) -> ClassOrder:
    """Row-major class placement 0..n-1, the no-information default."""
    if rows * cols != meta.n_classes:
        raise ValueError(f"{rows}x{cols} grid cannot hold {meta.n_classes} classes")
    return ClassOrder(grid=np.arange(meta.n_classes, dtype=np.int64).reshape(rows, cols))


def baseline_noise_poster(
    meta: DatasetMeta,
    ipc: float,
    class_grid: tuple[int, int],
    seed: int,
    order: ClassOrder | None = None,
) -> tuple[Poster, torch.Tensor]:
    """Gaussian poster with territory labels: the distillation starting point.

    Matches a zero-epoch fixed-mode run bit for bit at equal seed, which
    makes it the honest "no optimization" control.
    """
    rows, cols = class_grid
    if order is None:
        order = identity_order(meta, rows, cols)
    d_h, d_w = poster_dims(meta, ipc, class_grid)
    poster = init_poster(d_h, d_w, meta.channels, derive_seed(seed, "poster"))
    label_tensor = torch.from_numpy(init_label_tensor(order, meta.n_classes)).to(torch.float32)
    return poster, label_tensor


def coreset_budget(meta: DatasetMeta, ipc: float) -> int:
    """Pixel budget matching a poster at the given images-per-class rate."""
    return pixel_budget(ipc, meta).total_pixel_budget
