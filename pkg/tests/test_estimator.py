import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cropseq.estimator import SequenceSegmenter
from cropseq.rowsim import CameraModel, generate_dataset

CAM = CameraModel(width=32, height=32)
PARAMS = dict(depth=1, stem_maps=4, block_layers=1, growth_rate=2, epochs=1, resolution_mm=4.0)


@pytest.fixture(scope="module")
def data():
    s = generate_dataset(6, CAM, 3, seed=1)
    return np.stack([x.frames for x in s]), np.stack([x.labels for x in s])


def test_get_params_and_clone():
    est = SequenceSegmenter(**PARAMS)
    assert est.get_params()["stem_maps"] == 4
    assert clone(est).get_params() == est.get_params()


def test_fit_predict(data, tmp_path):
    X, y = data
    est = SequenceSegmenter(**PARAMS).fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (6, 1, 3, 32, 32)
    np.testing.assert_allclose(proba.sum(axis=2), 1.0, atol=1e-12)
    pred = est.predict(X, frame_scope="all")
    assert pred.shape == (6, 3, 32, 32) and pred.max() <= 2
    assert 0.0 <= est.score(X, y) <= 1.0
    # 4D single-channel input is accepted
    np.testing.assert_array_equal(est.predict(X[:, :, 0]), est.predict(X))
    est.save(tmp_path / "e.npz")
    back = SequenceSegmenter.load(tmp_path / "e.npz")
    np.testing.assert_array_equal(back.predict_proba(X), proba)
    assert back.get_params()["stem_maps"] == 4


def test_input_validation(data):
    X, y = data
    with pytest.raises(NotFittedError):
        SequenceSegmenter().predict(X)
    est = SequenceSegmenter(**PARAMS)
    with pytest.raises(ValueError):
        est.fit(X, y[:, :2])
    with pytest.raises(ValueError):
        est.fit(X, y + 5)
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
    with pytest.raises(ValueError):
        est.predict(X, frame_scope="middle")
