"""Compact convolutional classifier in functional form.

The distillation inner loop differentiates through its own training, so
parameters live in plain dicts of tensors rather than nn.Module state:
``sgd_step`` can then produce parameters that stay connected to the graph
of the loss that generated the gradients.

Each block is conv 3x3 -> instance norm (learnable affine) -> ReLU ->
2x2 average pool; a linear head maps the flattened features to logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import check_image_array

__all__ = [
    "ConvNetSpec",
    "init_params",
    "forward",
    "soft_cross_entropy",
    "sgd_step",
    "to_nchw",
    "train_params",
    "ConvNetClassifier",
]

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture hyperparameters plus the input geometry they act on."""

    depth: int
    width: int
    n_classes: int
    in_channels: int
    image_h: int
    image_w: int

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.in_channels < 1 or self.image_h < 1 or self.image_w < 1:
            raise ValueError("input geometry must be positive")
        h, w = self.image_h, self.image_w
        for _ in range(self.depth):
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(
                f"{self.depth} pooling stages collapse a "
                f"{self.image_h}x{self.image_w} input to nothing"
            )

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.image_h, self.image_w
        for _ in range(self.depth):
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_features(self) -> int:
        h, w = self.feature_hw
        return self.width * h * w


def _uniform(shape: tuple[int, ...], fan_in: int, generator: torch.Generator, dtype) -> torch.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    t = torch.empty(shape, dtype=dtype)
    t.uniform_(-bound, bound, generator=generator)
    return t


def init_params(spec: ConvNetSpec, seed: int, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Fresh parameter dict; fan-in-scaled uniform weights, seeded explicitly."""
    generator = torch.Generator().manual_seed(seed)
    params: dict[str, torch.Tensor] = {}
    in_ch = spec.in_channels
    for i in range(spec.depth):
        fan_in = in_ch * 9
        params[f"conv{i}.weight"] = _uniform((spec.width, in_ch, 3, 3), fan_in, generator, dtype)
        params[f"conv{i}.bias"] = _uniform((spec.width,), fan_in, generator, dtype)
        params[f"norm{i}.weight"] = torch.ones(spec.width, dtype=dtype)
        params[f"norm{i}.bias"] = torch.zeros(spec.width, dtype=dtype)
        in_ch = spec.width
    fan_in = spec.flat_features
    params["head.weight"] = _uniform((spec.n_classes, fan_in), fan_in, generator, dtype)
    params["head.bias"] = _uniform((spec.n_classes,), fan_in, generator, dtype)
    return params


def _instance_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    # Per-sample, per-channel statistics over the spatial extent; biased
    # variance so a constant channel normalizes to exactly zero.
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    x_hat = (x - mean) / torch.sqrt(var + _NORM_EPS)
    return weight.view(1, -1, 1, 1) * x_hat + bias.view(1, -1, 1, 1)


def forward(params: dict[str, torch.Tensor], x: torch.Tensor, spec: ConvNetSpec) -> torch.Tensor:
    """Logits for a batch in NCHW layout."""
    for i in range(spec.depth):
        x = F.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=1)
        x = _instance_norm(x, params[f"norm{i}.weight"], params[f"norm{i}.bias"])
        x = F.relu(x)
        x = F.avg_pool2d(x, 2)
    x = x.reshape(x.shape[0], -1)
    return F.linear(x, params["head.weight"], params["head.bias"])


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against probability-vector targets."""
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def sgd_step(
    params: dict[str, torch.Tensor],
    grads: tuple[torch.Tensor, ...],
    lr: float,
) -> dict[str, torch.Tensor]:
    """One functional SGD update; graph-preserving when the grads carry one."""
    return {name: p - lr * g for (name, p), g in zip(params.items(), grads)}


def to_nchw(images: torch.Tensor) -> torch.Tensor:
    """Channel-last (N, H, W, C) batch to the NCHW layout the net expects."""
    return images.permute(0, 3, 1, 2)


def _batch_indices(m: int, batch_size: int, steps: int, generator: torch.Generator) -> list[torch.Tensor]:
    """Minibatch index plan: reshuffled full passes, full batch if m fits."""
    if m <= batch_size:
        full = torch.arange(m)
        return [full for _ in range(steps)]
    plan: list[torch.Tensor] = []
    while len(plan) < steps:
        perm = torch.randperm(m, generator=generator)
        for start in range(0, m - batch_size + 1, batch_size):
            plan.append(perm[start : start + batch_size])
            if len(plan) == steps:
                break
    return plan


def train_params(
    spec: ConvNetSpec,
    x: torch.Tensor,
    y: torch.Tensor,
    steps: int,
    lr: float,
    batch_size: int,
    init_seed: int,
    batch_seed: int,
    plateau_patience: int | None = None,
    plateau_tol: float = 1e-4,
) -> dict[str, torch.Tensor]:
    """Train a fresh net on (x, y) with plain SGD; no graph kept.

    ``x`` is NCHW, ``y`` is (m, n_classes) probability rows.  Used by the
    evaluation protocol and the classifier wrapper; the distillation loop
    has its own unrolled variant.  With ``plateau_patience`` set, training
    stops early once the batch loss has not improved by ``plateau_tol``
    for that many consecutive steps.
    """
    params = init_params(spec, init_seed, dtype=x.dtype)
    for p in params.values():
        p.requires_grad_(True)
    generator = torch.Generator().manual_seed(batch_seed)
    best = float("inf")
    stale = 0
    for idx in _batch_indices(x.shape[0], batch_size, steps, generator):
        loss = soft_cross_entropy(forward(params, x[idx], spec), y[idx])
        grads = torch.autograd.grad(loss, tuple(params.values()))
        with torch.no_grad():
            params = {name: p - lr * g for (name, p), g in zip(params.items(), grads)}
        for p in params.values():
            p.requires_grad_(True)
        if plateau_patience is not None:
            value = float(loss.detach())
            if value < best - plateau_tol:
                best = value
                stale = 0
            else:
                stale += 1
                if stale >= plateau_patience:
                    break
    return {name: p.detach() for name, p in params.items()}


class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style front end over the functional net.

    fit accepts channel-last float64 image arrays with hard labels or
    probability rows; training runs a fixed number of SGD steps.
    """

    def __init__(
        self,
        depth: int = 3,
        width: int = 128,
        learning_rate: float = 0.01,
        batch_size: int = 256,
        train_steps: int = 500,
        seed: int = 0,
    ):
        self.depth = depth
        self.width = width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.seed = seed

    def fit(self, X, y):
        X = check_image_array(X)
        y = np.asarray(y)
        m, h, w, c = X.shape
        if y.ndim == 1:
            if y.shape[0] != m:
                raise ValueError(f"y has {y.shape[0]} rows for {m} images")
            n = int(y.max()) + 1 if y.size else 0
            if n < 2:
                raise ValueError("need at least two classes in y")
            soft = np.zeros((m, n), dtype=np.float64)
            soft[np.arange(m), y.astype(np.int64)] = 1.0
        elif y.ndim == 2:
            if y.shape[0] != m:
                raise ValueError(f"y has {y.shape[0]} rows for {m} images")
            n = y.shape[1]
            soft = y.astype(np.float64)
        else:
            raise ValueError(f"y must be 1-D or 2-D, got {y.ndim}-D")
        spec = ConvNetSpec(
            depth=self.depth,
            width=self.width,
            n_classes=n,
            in_channels=c,
            image_h=h,
            image_w=w,
        )
        x_t = to_nchw(torch.from_numpy(X).to(torch.float32))
        y_t = torch.from_numpy(soft).to(torch.float32)
        self.params_ = train_params(
            spec,
            x_t,
            y_t,
            steps=self.train_steps,
            lr=self.learning_rate,
            batch_size=self.batch_size,
            init_seed=self.seed,
            batch_seed=self.seed + 1,
        )
        self.spec_ = spec
        self.classes_ = np.arange(n)
        return self

    def decision_function(self, X):
        X = check_image_array(X)
        x_t = to_nchw(torch.from_numpy(X).to(torch.float32))
        with torch.no_grad():
            logits = forward(self.params_, x_t, self.spec_)
        return logits.numpy()

    def predict_proba(self, X):
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=-1).numpy()

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)
