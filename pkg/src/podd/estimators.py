"""Top-level estimator: the whole pipeline behind fit/transform.

PosterDistiller.fit consumes a labeled image array, places classes on the
grid from their mean-image embeddings, runs the bilevel optimization and
keeps the artifacts as fitted attributes.  transform materializes the
synthetic dataset the poster encodes.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import LabeledDataset, class_mean_embeddings
from .distillation import DistillConfig, DistillRuntime, distill, expand
from .evaluation import EvalProtocol, evaluate_poster
from .geometry import DatasetMeta
from .ordering import cosine_distance_matrix, greedy_place
from .validation import check_hard_labels, check_image_array

__all__ = ["PosterDistiller"]


class PosterDistiller(BaseEstimator):
    """Distill (X, y) into one poster image plus a label tensor.

    Parameters mirror DistillConfig; fitted attributes carry the poster
    (``poster_``, channel-last float array), the label tensor
    (``label_tensor_``), the class placement (``order_``) and the patch
    geometry (``spec_``).
    """

    def __init__(
        self,
        ipc: float = 1.0,
        class_rows: int = 1,
        class_cols: int = 2,
        patch_rows: int = 2,
        patch_cols: int = 2,
        label_mode: str = "learned",
        unroll_steps: int = 10,
        backprop_window: int = 5,
        distilled_batch_size: int = 4,
        data_batch_size: int = 256,
        inner_lr: float = 0.01,
        outer_lr: float = 0.001,
        epochs: int = 1,
        seed: int = 0,
        inner_depth: int = 3,
        inner_width: int = 64,
        outer_optimizer: str = "adam",
    ):
        self.ipc = ipc
        self.class_rows = class_rows
        self.class_cols = class_cols
        self.patch_rows = patch_rows
        self.patch_cols = patch_cols
        self.label_mode = label_mode
        self.unroll_steps = unroll_steps
        self.backprop_window = backprop_window
        self.distilled_batch_size = distilled_batch_size
        self.data_batch_size = data_batch_size
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.epochs = epochs
        self.seed = seed
        self.inner_depth = inner_depth
        self.inner_width = inner_width
        self.outer_optimizer = outer_optimizer

    def _config(self) -> DistillConfig:
        return DistillConfig(
            ipc=self.ipc,
            class_rows=self.class_rows,
            class_cols=self.class_cols,
            patch_rows=self.patch_rows,
            patch_cols=self.patch_cols,
            label_mode=self.label_mode,
            unroll_steps=self.unroll_steps,
            backprop_window=self.backprop_window,
            distilled_batch_size=self.distilled_batch_size,
            data_batch_size=min(self.data_batch_size, getattr(self, "_n_samples", self.data_batch_size)),
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            epochs=self.epochs,
            seed=self.seed,
            inner_depth=self.inner_depth,
            inner_width=self.inner_width,
            outer_optimizer=self.outer_optimizer,
        )

    def fit(self, X, y):
        X = check_image_array(X)
        n = self.class_rows * self.class_cols
        y = check_hard_labels(y, n, X.shape[0])
        meta = DatasetMeta(
            n_classes=n,
            image_h=X.shape[1],
            image_w=X.shape[2],
            channels=X.shape[3],
        )
        dataset = LabeledDataset(images=X, labels=y, meta=meta)
        self._n_samples = dataset.n_samples
        config = self._config()

        distances = cosine_distance_matrix(class_mean_embeddings(dataset))
        order = greedy_place(distances, self.class_rows, self.class_cols)
        runtime = DistillRuntime(dataset, order, config)
        poster, label_tensor = distill(dataset, order, config)

        self.meta_ = meta
        self.order_ = order
        self.spec_ = runtime.spec
        self.poster_ = poster.pixels.numpy()
        self.label_tensor_ = label_tensor.numpy()
        self.config_ = config
        return self

    def _expanded(self) -> tuple[torch.Tensor, torch.Tensor]:
        patches, labels = expand(
            torch.from_numpy(self.poster_),
            torch.from_numpy(self.label_tensor_),
            self.spec_,
            self.label_mode,
        )
        return patches, labels

    def transform(self, X=None):
        """The synthetic dataset itself: (patches, soft labels) as arrays.

        The input is ignored; a fitted distiller is a dataset generator,
        not a per-sample map.
        """
        patches, labels = self._expanded()
        return patches.numpy(), labels.numpy()

    def score(self, X, y, n_models: int = 1, train_budget: int = 500):
        """Mean accuracy on (X, y) of fresh models trained on the expansion."""
        X = check_image_array(X)
        y = check_hard_labels(y, self.meta_.n_classes, X.shape[0])
        test = LabeledDataset(images=X, labels=y, meta=self.meta_, split="test")
        protocol = EvalProtocol(
            n_models=n_models,
            train_budget=train_budget,
            learning_rate=self.inner_lr,
            depth=self.inner_depth,
            width=self.inner_width,
            seed=self.seed,
        )
        result = evaluate_poster(
            torch.from_numpy(self.poster_),
            torch.from_numpy(self.label_tensor_),
            self.spec_,
            self.label_mode,
            test,
            protocol,
        )
        return result.mean
