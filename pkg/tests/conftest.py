"""Shared fixtures: small datasets and geometries sized for fast tests."""

import numpy as np
import pytest
import torch

from podd.data import LabeledDataset, SyntheticSpec, generate_synthetic
from podd.geometry import DatasetMeta, extraction_spec
from podd.ordering import ClassOrder

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    # Small enough that a full distill run takes seconds.
    return SyntheticSpec(
        n_classes=4,
        image_h=8,
        image_w=8,
        channels=1,
        per_class=24,
        test_per_class=12,
        signal=0.3,
        noise=0.2,
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture(scope="session")
def tiny_train(tiny_data):
    return tiny_data[0]


@pytest.fixture(scope="session")
def tiny_test(tiny_data):
    return tiny_data[1]


@pytest.fixture(scope="session")
def default_data():
    """Train/test pair for the default desk-scale task (session cached)."""
    return generate_synthetic(SyntheticSpec())


@pytest.fixture
def square_order():
    return ClassOrder(grid=np.array([[0, 1], [2, 3]]))


@pytest.fixture
def toy_extraction():
    # 8x8 poster, 4x4 patches, 3x3 grid: overlapping offsets 0, 2, 4.
    return extraction_spec(8, 8, 4, 4, 3, 3)


@pytest.fixture
def small_meta():
    return DatasetMeta(n_classes=4, image_h=8, image_w=8, channels=1)


def make_dataset(images, labels, meta, split="train"):
    return LabeledDataset(
        images=np.asarray(images, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        meta=meta,
        split=split,
    )
