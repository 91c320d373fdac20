import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from coopseg.config import DataConfig
from coopseg.data import generate_splits
from coopseg.estimator import CooperativeSegmenter

PARAMS = dict(input_hw=16, stem_channels=4, levels=((4, 1), (8, 1)), bottleneck_channels=8,
              clf_batch=8, batch_ratio=4, rounds=3)


@pytest.fixture(scope="module")
def arrays():
    tr, va = generate_splits(DataConfig(n_train=24, n_val=10, size=16, seed=9))
    return (tr.images, tr.grades, tr.masks), (va.images, va.grades, va.masks)


@pytest.fixture(scope="module")
def fitted(arrays):
    (X, y, masks), _ = arrays
    return CooperativeSegmenter(**PARAMS).fit(X, y, masks)


def test_params_roundtrip():
    est = CooperativeSegmenter(**PARAMS)
    assert est.get_params()["rounds"] == 3
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.set_params(seg_lr=0.01)
    assert twin.seg_lr == 0.01 and est.seg_lr == 1e-3


def test_outputs(fitted, arrays):
    _, (Xv, yv, mv) = arrays
    proba = fitted.predict_proba(Xv)
    assert proba.shape == (10, len(fitted.classes_))
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert set(fitted.predict(Xv)) <= set(fitted.classes_)
    masks = fitted.predict_masks(Xv)
    assert masks.shape == (10, 16, 16) and masks.max() < 6
    assert fitted.transform(Xv).shape == (10, 8)
    assert 0.0 <= fitted.score(Xv, yv) <= 1.0
    assert 0.0 <= fitted.score_masks(Xv, mv) <= 1.0


def test_fit_is_deterministic(arrays, fitted):
    (X, y, masks), (Xv, _, _) = arrays
    again = CooperativeSegmenter(**PARAMS).fit(X, y, masks)
    assert np.array_equal(again.predict_proba(Xv), fitted.predict_proba(Xv))


def test_validation_data_is_reported(arrays):
    (X, y, masks), val = arrays
    est = CooperativeSegmenter(**PARAMS).fit(X, y, masks, validation_data=val)
    assert [r["round"] for r in est.report_.evaluations()] == [0, 3]


def test_unfitted_raises(arrays):
    _, (Xv, _, _) = arrays
    with pytest.raises(NotFittedError):
        CooperativeSegmenter(**PARAMS).predict(Xv)


def test_input_validation(arrays):
    (X, y, masks), _ = arrays
    est = CooperativeSegmenter(**PARAMS)
    with pytest.raises(ValueError):
        est.fit(X[:, :2], y, masks)
    with pytest.raises(ValueError):
        est.fit(X, y[:-1], masks)
    with pytest.raises(ValueError):
        est.fit(X, y)
    with pytest.raises(ValueError):
        est.fit(X, y, masks.astype(np.float32))
    with pytest.raises(ValueError):
        est.fit(X, np.zeros_like(y), masks)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y, masks)


def test_clf_only_without_masks(arrays):
    (X, y, _), (Xv, _, _) = arrays
    est = CooperativeSegmenter(**{**PARAMS, "mode": "clf_only", "rounds": 1}).fit(X, y)
    assert est.predict(Xv).shape == (10,)
