"""PosterDistiller estimator behavior: sklearn contract, fit artifacts, transform, score."""

import numpy as np
import pytest
import torch
from sklearn.base import clone

from podd.estimators import PosterDistiller


def tiny_distiller(**overrides):
    params = dict(
        ipc=1.0,
        class_rows=2,
        class_cols=2,
        patch_rows=2,
        patch_cols=2,
        label_mode="fixed",
        unroll_steps=2,
        backprop_window=2,
        distilled_batch_size=4,
        data_batch_size=48,
        inner_lr=0.1,
        outer_lr=0.05,
        epochs=1,
        seed=0,
        inner_depth=3,
        inner_width=8,
    )
    params.update(overrides)
    return PosterDistiller(**params)


@pytest.fixture(scope="module")
def fitted(tiny_train):
    est = tiny_distiller()
    est.fit(tiny_train.images, tiny_train.labels)
    return est


class TestSklearnContract:
    def test_get_params_round_trips(self):
        est = tiny_distiller()
        params = est.get_params()
        assert params["ipc"] == 1.0
        assert params["label_mode"] == "fixed"
        rebuilt = PosterDistiller(**params)
        assert rebuilt.get_params() == params

    def test_set_params_returns_self_and_applies(self):
        est = tiny_distiller()
        out = est.set_params(epochs=3, outer_lr=0.2)
        assert out is est
        assert est.epochs == 3
        assert est.outer_lr == 0.2

    def test_clone_copies_params_not_fit_state(self, fitted):
        copy = clone(fitted)
        assert copy.get_params() == fitted.get_params()
        assert not hasattr(copy, "poster_")

    def test_unfitted_has_no_artifacts(self):
        est = tiny_distiller()
        assert not hasattr(est, "poster_")
        assert not hasattr(est, "label_tensor_")


class TestFit:
    def test_returns_self(self, tiny_train):
        est = tiny_distiller()
        assert est.fit(tiny_train.images, tiny_train.labels) is est

    def test_fitted_attributes(self, fitted):
        assert fitted.poster_.shape == (16, 16, 1)
        assert fitted.poster_.dtype == np.float32
        assert np.isfinite(fitted.poster_).all()
        assert fitted.label_tensor_.shape == (2, 2, 4)
        assert np.allclose(fitted.label_tensor_.sum(axis=-1), 1.0, atol=1e-6)
        assert fitted.meta_.n_classes == 4
        assert fitted.order_.grid.shape == (2, 2)
        assert sorted(fitted.order_.grid.ravel().tolist()) == [0, 1, 2, 3]
        assert fitted.spec_.n_patches == 4
        assert fitted.config_.epochs == 1

    def test_deterministic_given_seed(self, tiny_train):
        a = tiny_distiller().fit(tiny_train.images, tiny_train.labels)
        b = tiny_distiller().fit(tiny_train.images, tiny_train.labels)
        assert np.array_equal(a.poster_, b.poster_)
        assert np.array_equal(a.label_tensor_, b.label_tensor_)

    def test_seed_changes_poster(self, tiny_train):
        a = tiny_distiller().fit(tiny_train.images, tiny_train.labels)
        b = tiny_distiller(seed=1).fit(tiny_train.images, tiny_train.labels)
        assert not np.array_equal(a.poster_, b.poster_)

    def test_large_data_batch_is_clamped(self, tiny_train):
        est = tiny_distiller(data_batch_size=10_000)
        est.fit(tiny_train.images, tiny_train.labels)
        assert est.config_.data_batch_size == tiny_train.n_samples

    def test_rejects_non_image_input(self):
        est = tiny_distiller()
        with pytest.raises(ValueError, match="n_samples, height, width, channels"):
            est.fit(np.zeros((8, 8)), np.zeros(8, dtype=np.int64))

    def test_rejects_out_of_range_labels(self, tiny_train):
        est = tiny_distiller()
        bad = tiny_train.labels.copy()
        bad[0] = 4
        with pytest.raises(ValueError, match=r"lie in \[0, 4\)"):
            est.fit(tiny_train.images, bad)

    def test_rejects_label_length_mismatch(self, tiny_train):
        est = tiny_distiller()
        with pytest.raises(ValueError, match="must have shape"):
            est.fit(tiny_train.images, tiny_train.labels[:-1])

    def test_rejects_non_finite_pixels(self, tiny_train):
        est = tiny_distiller()
        bad = tiny_train.images.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            est.fit(bad, tiny_train.labels)


class TestTransformAndScore:
    def test_transform_materializes_patches(self, fitted):
        patches, labels = fitted.transform()
        assert patches.shape == (4, 8, 8, 1)
        assert labels.shape == (4, 4)
        assert (labels >= 0).all()
        assert np.allclose(labels.sum(axis=1), 1.0, atol=1e-6)

    def test_transform_matches_artifacts(self, fitted):
        patches, _ = fitted.transform()
        # the top-left patch is literally the top-left poster crop
        corner = fitted.poster_[:8, :8, :]
        assert np.allclose(patches[0], corner, atol=1e-7)

    def test_score_is_an_accuracy(self, fitted, tiny_test):
        acc = fitted.score(tiny_test.images, tiny_test.labels, n_models=1, train_budget=5)
        assert 0.0 <= acc <= 1.0

    def test_score_validates_labels(self, fitted, tiny_test):
        bad = tiny_test.labels.copy()
        bad[0] = -1
        with pytest.raises(ValueError, match="labels must lie"):
            fitted.score(tiny_test.images, bad)

    def test_learned_mode_labels_leave_one_hot(self, tiny_train):
        est = tiny_distiller(label_mode="learned", epochs=2, outer_lr=0.5)
        est.fit(tiny_train.images, tiny_train.labels)
        one_hot_rows = np.isclose(est.label_tensor_.max(axis=-1), 1.0).all()
        assert not one_hot_rows
