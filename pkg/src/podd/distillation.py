"""Bilevel optimization of the poster and its label tensor.

Each outer step trains a freshly seeded network on patches extracted from
the current poster, then scores the trained network on a batch of real
data; that score's gradient flows back through the inner training into
the poster pixels and, in learned mode, the label tensor.

Unrolling every inner step would be memory-hungry, so the loop truncates:
the inner run lasts a random t_end steps, the first t_end - window of
them execute without building autograd history (the network sees frozen
copies of the patches), and only the final ``backprop_window`` steps are
differentiated through.  Sampling t_end uniformly lets the truncated
window cover every stage of inner training across outer steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset, batch_iterator
from .geometry import (
    ExtractionSpec,
    Poster,
    extract_patches,
    extraction_spec,
    init_poster,
    poster_dims,
)
from .labeling import (
    fixed_patch_labels,
    init_label_tensor,
    learned_patch_labels,
    patch_cell_weights,
    project_labels,
    upsample_class_grid,
)
from .models import ConvNetSpec, forward, init_params, sgd_step, soft_cross_entropy, to_nchw
from .ordering import ClassOrder
from .seeding import derive_seed

__all__ = [
    "DistillConfig",
    "DistillState",
    "DistillRuntime",
    "UnrollPlan",
    "sample_unroll_length",
    "make_unroll_plan",
    "resolve_patch_labels",
    "expand",
    "unrolled_gradients",
    "outer_step",
    "init_state",
    "make_optimizer",
    "distill",
]

LABEL_MODES = ("fixed", "learned")


@dataclass(frozen=True)
class DistillConfig:
    """Everything that determines a distillation run besides the data."""

    ipc: float
    class_rows: int
    class_cols: int
    patch_rows: int
    patch_cols: int
    label_mode: str
    unroll_steps: int
    backprop_window: int
    distilled_batch_size: int
    data_batch_size: int
    inner_lr: float
    outer_lr: float = 0.001
    epochs: int = 1
    seed: int = 0
    inner_depth: int = 3
    inner_width: int = 128
    outer_optimizer: str = "adam"
    checkpoint_every: int = 100

    def __post_init__(self) -> None:
        if self.ipc <= 0:
            raise ValueError("ipc must be positive")
        if min(self.class_rows, self.class_cols, self.patch_rows, self.patch_cols) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not 1 <= self.backprop_window <= self.unroll_steps:
            raise ValueError(
                f"backprop_window must lie in [1, unroll_steps], got "
                f"{self.backprop_window} with unroll_steps={self.unroll_steps}"
            )
        p = self.patch_rows * self.patch_cols
        if not 1 <= self.distilled_batch_size <= p:
            raise ValueError(
                f"distilled_batch_size must lie in [1, {p} patches], "
                f"got {self.distilled_batch_size}"
            )
        if self.data_batch_size < 1:
            raise ValueError("data_batch_size must be positive")
        if self.inner_lr <= 0 or self.outer_lr < 0:
            raise ValueError("inner_lr must be positive and outer_lr non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError(f"outer_optimizer must be 'adam' or 'sgd', got {self.outer_optimizer!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")


@dataclass
class DistillState:
    """Mutable optimization state; poster and label tensor are leaf tensors."""

    poster: torch.Tensor
    label_tensor: torch.Tensor
    step: int
    plan_rng: np.random.Generator
    loss_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class UnrollPlan:
    """Deterministic recipe for one outer step's inner training run."""

    t_end: int
    tracked_steps: int
    init_seed: int
    patch_batches: tuple[np.ndarray, ...]


def sample_unroll_length(rng: np.random.Generator, backprop_window: int, unroll_steps: int) -> int:
    """Uniform draw from {backprop_window, ..., unroll_steps}."""
    return int(rng.integers(backprop_window, unroll_steps + 1))


def make_unroll_plan(
    rng: np.random.Generator,
    step: int,
    root_seed: int,
    n_patches: int,
    batch_size: int,
    backprop_window: int,
    unroll_steps: int,
) -> UnrollPlan:
    """Sample the unroll length and per-step patch batches for outer step ``step``.

    Patch batches are drawn without replacement and reshuffled every inner
    step; the inner init seed is derived from the outer step index so no
    two outer steps reuse a network initialization.
    """
    t_end = sample_unroll_length(rng, backprop_window, unroll_steps)
    batches = tuple(
        rng.choice(n_patches, size=batch_size, replace=False) for _ in range(t_end)
    )
    return UnrollPlan(
        t_end=t_end,
        tracked_steps=backprop_window,
        init_seed=derive_seed(root_seed, "inner-init", step),
        patch_batches=batches,
    )


class DistillRuntime:
    """Geometry, labeling constants and the inner-model spec for one run.

    Validates the config against the dataset before any compute happens.
    """

    def __init__(self, dataset: LabeledDataset, order: ClassOrder, config: DistillConfig):
        meta = dataset.meta
        if order.n != meta.n_classes:
            raise ValueError(f"order covers {order.n} classes, dataset has {meta.n_classes}")
        if (order.rows, order.cols) != (config.class_rows, config.class_cols):
            raise ValueError(
                f"order grid {order.rows}x{order.cols} does not match config "
                f"{config.class_rows}x{config.class_cols}"
            )
        if config.data_batch_size > dataset.n_samples:
            raise ValueError(
                f"data_batch_size {config.data_batch_size} exceeds dataset size "
                f"{dataset.n_samples}"
            )
        d_h, d_w = poster_dims(meta, config.ipc, (config.class_rows, config.class_cols))
        spec = extraction_spec(
            d_h,
            d_w,
            patch_h=meta.image_h,
            patch_w=meta.image_w,
            grid_rows=config.patch_rows,
            grid_cols=config.patch_cols,
        )
        if config.distilled_batch_size > spec.n_patches:
            raise ValueError(
                f"distilled_batch_size {config.distilled_batch_size} exceeds "
                f"{spec.n_patches} patches"
            )
        self.dataset = dataset
        self.meta = meta
        self.order = order
        self.config = config
        self.spec = spec
        self.model_spec = ConvNetSpec(
            depth=config.inner_depth,
            width=config.inner_width,
            n_classes=meta.n_classes,
            in_channels=meta.channels,
            image_h=meta.image_h,
            image_w=meta.image_w,
        )
        pixel_map = upsample_class_grid(order, d_h, d_w)
        self.fixed_labels = fixed_patch_labels(pixel_map, spec, meta.n_classes)
        self.cell_weights = patch_cell_weights(spec, order.rows, order.cols)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.dataset.n_samples / self.config.data_batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch


def resolve_patch_labels(
    label_tensor: torch.Tensor,
    label_mode: str,
    fixed_labels: np.ndarray,
    cell_weights: np.ndarray,
) -> torch.Tensor:
    """Per-patch soft labels under the active mode; differentiable in learned mode."""
    if label_mode == "fixed":
        return torch.from_numpy(fixed_labels).to(label_tensor.dtype)
    weights = torch.from_numpy(cell_weights).to(label_tensor.dtype)
    return learned_patch_labels(label_tensor, weights)


def expand(
    poster: Poster | torch.Tensor,
    label_tensor: torch.Tensor,
    spec: ExtractionSpec,
    label_mode: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Materialize the synthetic dataset: p patches and their p soft labels.

    In fixed mode the class grid is recovered from the label tensor's
    argmax (exact, since fixed-mode tensors stay one-hot).
    """
    pixels = poster.pixels if isinstance(poster, Poster) else poster
    if label_mode not in LABEL_MODES:
        raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")
    patches = extract_patches(pixels, spec)
    rows, cols, n = label_tensor.shape
    if label_mode == "fixed":
        grid = label_tensor.detach().argmax(dim=-1).numpy().astype(np.int64)
        order = ClassOrder(grid=grid)
        pixel_map = upsample_class_grid(order, spec.poster_h, spec.poster_w)
        labels = torch.from_numpy(fixed_patch_labels(pixel_map, spec, n)).to(pixels.dtype)
    else:
        weights = torch.from_numpy(patch_cell_weights(spec, rows, cols)).to(label_tensor.dtype)
        labels = learned_patch_labels(label_tensor, weights)
    return patches, labels


def _inner_loss(
    params: dict[str, torch.Tensor],
    patches_nchw: torch.Tensor,
    labels: torch.Tensor,
    idx: np.ndarray,
    model_spec: ConvNetSpec,
) -> torch.Tensor:
    batch_idx = torch.from_numpy(np.ascontiguousarray(idx))
    logits = forward(params, patches_nchw[batch_idx], model_spec)
    return soft_cross_entropy(logits, labels[batch_idx])


def unrolled_gradients(
    poster: torch.Tensor,
    label_tensor: torch.Tensor,
    label_mode: str,
    spec: ExtractionSpec,
    fixed_labels: np.ndarray,
    cell_weights: np.ndarray,
    model_spec: ConvNetSpec,
    inner_lr: float,
    plan: UnrollPlan,
    batch_images: torch.Tensor,
    batch_labels: torch.Tensor,
) -> tuple[float, torch.Tensor, torch.Tensor | None]:
    """Gradient of the real-data loss after inner training, w.r.t. poster and labels.

    Runs plan.t_end inner SGD steps from a fresh init; only the final
    plan.tracked_steps are differentiated through.  Returns (outer loss,
    poster gradient, label-tensor gradient or None in fixed mode).
    ``batch_images`` is NCHW real data, ``batch_labels`` its hard labels.
    """
    burn_in = plan.t_end - plan.tracked_steps
    if burn_in < 0:
        raise ValueError(f"plan tracks {plan.tracked_steps} of {plan.t_end} steps")

    params = init_params(model_spec, plan.init_seed, dtype=poster.dtype)
    for p in params.values():
        p.requires_grad_(True)

    if burn_in > 0:
        # Frozen copies: these steps shape the network but contribute no
        # gradient path back to the poster or labels.
        with torch.no_grad():
            frozen_patches = to_nchw(extract_patches(poster.detach(), spec))
            frozen_labels = resolve_patch_labels(
                label_tensor.detach(), label_mode, fixed_labels, cell_weights
            )
        for t in range(burn_in):
            loss = _inner_loss(params, frozen_patches, frozen_labels, plan.patch_batches[t], model_spec)
            grads = torch.autograd.grad(loss, tuple(params.values()))
            with torch.no_grad():
                params = {k: p - inner_lr * g for (k, p), g in zip(params.items(), grads)}
            for p in params.values():
                p.requires_grad_(True)

    live_patches = to_nchw(extract_patches(poster, spec))
    live_labels = resolve_patch_labels(label_tensor, label_mode, fixed_labels, cell_weights)
    for t in range(burn_in, plan.t_end):
        loss = _inner_loss(params, live_patches, live_labels, plan.patch_batches[t], model_spec)
        grads = torch.autograd.grad(loss, tuple(params.values()), create_graph=True)
        params = sgd_step(params, grads, inner_lr)

    outer_loss = F.cross_entropy(forward(params, batch_images, model_spec), batch_labels)
    wants = [poster] + ([label_tensor] if label_mode == "learned" else [])
    grads = torch.autograd.grad(outer_loss, wants, allow_unused=False)
    label_grad = grads[1] if label_mode == "learned" else None
    return float(outer_loss.detach()), grads[0], label_grad


def init_state(runtime: DistillRuntime, dtype: torch.dtype = torch.float32) -> DistillState:
    """Gaussian poster, one-hot label tensor, fresh plan stream."""
    cfg = runtime.config
    poster = init_poster(
        runtime.spec.poster_h,
        runtime.spec.poster_w,
        runtime.meta.channels,
        derive_seed(cfg.seed, "poster"),
        dtype=dtype,
    ).pixels.clone()
    poster.requires_grad_(True)
    label_tensor = torch.from_numpy(init_label_tensor(runtime.order, runtime.meta.n_classes)).to(dtype)
    label_tensor.requires_grad_(True)
    return DistillState(
        poster=poster,
        label_tensor=label_tensor,
        step=0,
        plan_rng=np.random.default_rng(derive_seed(cfg.seed, "unroll")),
    )


def make_optimizer(runtime: DistillRuntime, state: DistillState) -> torch.optim.Optimizer:
    cfg = runtime.config
    targets = [state.poster]
    if cfg.label_mode == "learned":
        targets.append(state.label_tensor)
    if cfg.outer_optimizer == "adam":
        return torch.optim.Adam(targets, lr=cfg.outer_lr)
    return torch.optim.SGD(targets, lr=cfg.outer_lr)


def outer_step(
    state: DistillState,
    batch: tuple[np.ndarray, np.ndarray],
    runtime: DistillRuntime,
    optimizer: torch.optim.Optimizer,
) -> dict[str, float]:
    """One outer update in place; returns the scalar log record.

    Aborts on a non-finite outer loss with the recent loss history, since
    continuing would corrupt the poster irrecoverably.
    """
    cfg = runtime.config
    plan = make_unroll_plan(
        state.plan_rng,
        state.step,
        cfg.seed,
        runtime.spec.n_patches,
        cfg.distilled_batch_size,
        cfg.backprop_window,
        cfg.unroll_steps,
    )
    images, labels = batch
    batch_images = to_nchw(torch.from_numpy(images).to(state.poster.dtype))
    batch_labels = torch.from_numpy(labels)
    loss, poster_grad, label_grad = unrolled_gradients(
        state.poster,
        state.label_tensor,
        cfg.label_mode,
        runtime.spec,
        runtime.fixed_labels,
        runtime.cell_weights,
        runtime.model_spec,
        cfg.inner_lr,
        plan,
        batch_images,
        batch_labels,
    )
    if not math.isfinite(loss):
        recent = ", ".join(f"{v:.4f}" for v in state.loss_history[-10:])
        raise RuntimeError(
            f"non-finite outer loss {loss} at step {state.step} "
            f"(t_end={plan.t_end}; recent losses: [{recent}])"
        )

    optimizer.zero_grad()
    state.poster.grad = poster_grad
    if label_grad is not None:
        state.label_tensor.grad = label_grad
    optimizer.step()
    with torch.no_grad():
        state.label_tensor.copy_(project_labels(state.label_tensor))
    if not torch.isfinite(state.poster).all():
        raise RuntimeError(f"poster became non-finite after step {state.step}")

    state.loss_history.append(loss)
    del state.loss_history[:-50]
    state.step += 1
    return {
        "step": state.step,
        "t_end": plan.t_end,
        "outer_loss": loss,
        "poster_grad_norm": float(poster_grad.norm()),
        "label_grad_norm": float(label_grad.norm()) if label_grad is not None else 0.0,
        "inner_init_seed": plan.init_seed,
    }


def distill(
    dataset: LabeledDataset,
    order: ClassOrder,
    config: DistillConfig,
    *,
    log_fn: Callable[[dict[str, float]], None] | None = None,
    checkpoint_fn: Callable[[DistillState, torch.optim.Optimizer], None] | None = None,
    state: DistillState | None = None,
    optimizer_state: dict | None = None,
) -> tuple[Poster, torch.Tensor]:
    """Run the full outer loop and return the poster and label tensor.

    Deterministic per config seed.  ``state``/``optimizer_state`` resume a
    checkpointed run: already-consumed data batches are skipped so the
    batch stream lines up with the step counter.
    """
    runtime = DistillRuntime(dataset, order, config)
    if state is None:
        state = init_state(runtime)
    optimizer = make_optimizer(runtime, state)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    batches = batch_iterator(
        dataset,
        config.data_batch_size,
        derive_seed(config.seed, "data-batches"),
        epochs=config.epochs,
    )
    remaining = runtime.total_steps - state.step
    if remaining < 0:
        raise ValueError(f"checkpoint step {state.step} exceeds {runtime.total_steps} total steps")
    batches = islice(batches, state.step, None)

    for batch in batches:
        record = outer_step(state, batch, runtime, optimizer)
        if log_fn is not None:
            log_fn(record)
        if checkpoint_fn is not None and state.step % config.checkpoint_every == 0:
            checkpoint_fn(state, optimizer)
    if checkpoint_fn is not None and runtime.total_steps > 0:
        checkpoint_fn(state, optimizer)

    return Poster(pixels=state.poster.detach().clone()), state.label_tensor.detach().clone()
