"""Downstream evaluation protocol and the three baselines."""

import numpy as np
import pytest
import torch

from podd.data import generate_synthetic
from podd.distillation import DistillConfig, distill
from podd.evaluation import (
    EvalProtocol,
    baseline_noise_poster,
    baseline_random_coreset,
    coreset_budget,
    evaluate_poster,
    evaluate_real_images,
    evaluate_training_set,
    identity_order,
)
from podd.geometry import DatasetMeta, extraction_spec
from podd.ordering import ClassOrder

from conftest import make_dataset


FAST = EvalProtocol(n_models=2, train_budget=20, learning_rate=0.1, depth=2, width=8, seed=5)


def test_protocol_validation():
    with pytest.raises(ValueError):
        EvalProtocol(n_models=0)
    with pytest.raises(ValueError):
        EvalProtocol(train_budget=0)
    with pytest.raises(ValueError):
        EvalProtocol(learning_rate=0.0)


def test_single_model_std_zero(tiny_train, tiny_test):
    proto = EvalProtocol(n_models=1, train_budget=10, learning_rate=0.1, depth=2, width=8)
    images = torch.from_numpy(tiny_train.images[:8])
    labels = torch.eye(4, dtype=torch.float64)[tiny_train.labels[:8]]
    result = evaluate_training_set(images, labels, tiny_test, proto)
    assert result.std == 0.0
    assert len(result.per_model) == 1
    assert 0.0 <= result.mean <= 1.0


def test_constant_class_test_set(tiny_train, small_meta):
    """All test samples from one class: any model predicting it scores 1.0."""
    one_class = make_dataset(
        np.full((6, 8, 8, 1), 0.5), [2] * 6, small_meta, split="test"
    )
    # training set of a single strongly labeled class-2 image pushes every
    # prediction to class 2
    images = torch.from_numpy(np.full((4, 8, 8, 1), 0.5))
    labels = torch.zeros(4, 4, dtype=torch.float64)
    labels[:, 2] = 1.0
    proto = EvalProtocol(n_models=1, train_budget=300, learning_rate=0.5, depth=2, width=8)
    result = evaluate_training_set(images, labels, one_class, proto)
    assert result.mean == 1.0


def test_seed_prefix_stability(tiny_train, tiny_test):
    """Doubling n_models keeps the first half of per-model accuracies."""
    images = torch.from_numpy(tiny_train.images[:16])
    labels = torch.eye(4, dtype=torch.float64)[tiny_train.labels[:16]]
    small = evaluate_training_set(images, labels, tiny_test, EvalProtocol(
        n_models=2, train_budget=15, learning_rate=0.1, depth=2, width=8, seed=9))
    large = evaluate_training_set(images, labels, tiny_test, EvalProtocol(
        n_models=4, train_budget=15, learning_rate=0.1, depth=2, width=8, seed=9))
    assert large.per_model[:2] == small.per_model


def test_evaluate_training_set_shape_mismatch(tiny_test):
    with pytest.raises(ValueError, match="label rows"):
        evaluate_training_set(
            torch.zeros(4, 8, 8, 1), torch.zeros(3, 4), tiny_test, FAST
        )


def test_evaluate_poster_runs(tiny_train, tiny_test, square_order):
    cfg = DistillConfig(
        ipc=1.0, class_rows=2, class_cols=2, patch_rows=2, patch_cols=2,
        label_mode="fixed", unroll_steps=2, backprop_window=2,
        distilled_batch_size=4, data_batch_size=32, inner_lr=0.1,
        outer_lr=0.05, epochs=1, inner_depth=2, inner_width=8,
    )
    poster, labels = distill(tiny_train, square_order, cfg)
    spec = extraction_spec(16, 16, 8, 8, 2, 2)
    result = evaluate_poster(poster, labels, spec, "fixed", tiny_test, FAST)
    assert 0.0 <= result.mean <= 1.0
    assert len(result.per_model) == 2


def test_evaluate_real_images_one_hot(tiny_train, tiny_test):
    subset = make_dataset(
        tiny_train.images[:8], tiny_train.labels[:8], tiny_train.meta
    )
    result = evaluate_real_images(subset, tiny_test, FAST)
    assert 0.0 <= result.mean <= 1.0


def test_coreset_size_and_balance(tiny_train):
    # 12 images of 64 px each
    coreset = baseline_random_coreset(tiny_train, 12 * 64, seed=0)
    assert coreset.n_samples == 12
    counts = np.bincount(coreset.labels, minlength=4)
    assert counts.tolist() == [3, 3, 3, 3]


def test_coreset_remainder_distributed(tiny_train):
    coreset = baseline_random_coreset(tiny_train, 6 * 64, seed=1)
    counts = np.bincount(coreset.labels, minlength=4)
    assert counts.sum() == 6
    assert counts.min() == 1 and counts.max() == 2


def test_coreset_budget_floor(tiny_train):
    # 129 px buys exactly two 64-px images
    coreset = baseline_random_coreset(tiny_train, 129, seed=2)
    assert coreset.n_samples == 2


def test_coreset_deterministic(tiny_train):
    a = baseline_random_coreset(tiny_train, 8 * 64, seed=3)
    b = baseline_random_coreset(tiny_train, 8 * 64, seed=3)
    c = baseline_random_coreset(tiny_train, 8 * 64, seed=4)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_coreset_rejects_tiny_budget(tiny_train):
    with pytest.raises(ValueError, match="below one"):
        baseline_random_coreset(tiny_train, 63, seed=0)


def test_coreset_real_samples(tiny_train):
    coreset = baseline_random_coreset(tiny_train, 4 * 64, seed=5)
    # every coreset row exists in the source data
    flat_src = tiny_train.images.reshape(tiny_train.n_samples, -1)
    for img in coreset.images.reshape(coreset.n_samples, -1):
        assert (np.abs(flat_src - img).sum(axis=1) < 1e-12).any()


def test_noise_poster_is_distill_step_zero(tiny_train, small_meta, square_order):
    """The noise control equals a zero-epoch fixed-mode run at equal seed."""
    cfg = DistillConfig(
        ipc=1.0, class_rows=2, class_cols=2, patch_rows=2, patch_cols=2,
        label_mode="fixed", unroll_steps=2, backprop_window=2,
        distilled_batch_size=4, data_batch_size=32, inner_lr=0.1,
        epochs=0, seed=123, inner_depth=2, inner_width=8,
    )
    poster, labels = distill(tiny_train, square_order, cfg)
    noise_poster, noise_labels = baseline_noise_poster(
        small_meta, 1.0, (2, 2), seed=123, order=square_order
    )
    assert torch.equal(poster.pixels, noise_poster.pixels)
    assert torch.equal(labels, noise_labels)


def test_noise_poster_deterministic(small_meta):
    a, _ = baseline_noise_poster(small_meta, 1.0, (2, 2), seed=7)
    b, _ = baseline_noise_poster(small_meta, 1.0, (2, 2), seed=7)
    assert torch.equal(a.pixels, b.pixels)


def test_identity_order(small_meta):
    order = identity_order(small_meta, 2, 2)
    assert order.grid.tolist() == [[0, 1], [2, 3]]
    with pytest.raises(ValueError):
        identity_order(small_meta, 3, 2)


def test_coreset_budget_matches_poster_budget():
    meta = DatasetMeta(n_classes=4, image_h=16, image_w=16, channels=3)
    assert coreset_budget(meta, 0.5) == 512
    assert coreset_budget(meta, 1.0) == 1024


def test_order_independence_of_mean(tiny_train, tiny_test):
    """Mean and std come from a seed-indexed set, not execution order."""
    images = torch.from_numpy(tiny_train.images[:16])
    labels = torch.eye(4, dtype=torch.float64)[tiny_train.labels[:16]]
    result = evaluate_training_set(images, labels, tiny_test, EvalProtocol(
        n_models=3, train_budget=15, learning_rate=0.1, depth=2, width=8, seed=1))
    again = evaluate_training_set(images, labels, tiny_test, EvalProtocol(
        n_models=3, train_budget=15, learning_rate=0.1, depth=2, width=8, seed=1))
    assert result.per_model == again.per_model
    assert result.mean == pytest.approx(float(np.mean(result.per_model)))
    assert result.std == pytest.approx(float(np.std(result.per_model, ddof=1)))
