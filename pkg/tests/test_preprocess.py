import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from cropseq.preprocess import (Preprocessor, gaussian_blur5, gaussian_kernel5, preprocess_batch,
                                preprocess_image, standardize_normalize)


def blur_by_loops(img):
    taps = np.exp(-0.5 * np.arange(-2, 3) ** 2)
    k2 = np.outer(taps, taps)
    k2 /= k2.sum()
    p = np.pad(img, 2, mode="edge")
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = (p[i:i + 5, j:j + 5] * k2).sum()
    return out


def test_kernel_weights():
    g = gaussian_kernel5()
    assert np.isclose(g.sum(), 1.0)
    np.testing.assert_allclose(g, g[::-1])
    assert np.isclose(np.outer(g, g)[2, 2], 0.16210282163712664)


def test_blur_matches_direct_convolution():
    img = np.random.default_rng(0).random((9, 11))
    np.testing.assert_allclose(gaussian_blur5(img), blur_by_loops(img), atol=1e-14)


def test_blur_preserves_constants():
    np.testing.assert_allclose(gaussian_blur5(np.full((6, 7), 3.5)), 3.5)


def test_standardize_normalize_range():
    z = standardize_normalize(np.random.default_rng(1).normal(size=(8, 8)))
    assert np.isclose(np.abs(z).max(), 1.0)
    assert abs(z.mean()) < 1e-12


def test_constant_channel_maps_to_zero():
    np.testing.assert_array_equal(standardize_normalize(np.full((4, 4), 7.0)), 0)
    np.testing.assert_array_equal(preprocess_image(np.full((2, 4, 4), -1.0)), 0)


def test_channels_are_independent():
    rng = np.random.default_rng(2)
    img = rng.random((3, 10, 10))
    out = preprocess_image(img)
    for c in range(3):
        np.testing.assert_allclose(out[c], standardize_normalize(gaussian_blur5(img[c])))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 6, 7), elements=st.floats(-5, 5)),
    st.floats(0.1, 10), st.floats(-3, 3),
)
def test_positive_affine_invariance(img, a, b):
    if np.ptp(img, axis=(1, 2)).min() < 1e-3:
        return
    np.testing.assert_allclose(preprocess_image(a * img + b), preprocess_image(img), atol=1e-9)


def test_batch_matches_per_image():
    x = np.random.default_rng(3).random((2, 3, 1, 8, 8))
    out = preprocess_batch(x)
    np.testing.assert_allclose(out[1, 2], preprocess_image(x[1, 2]))


def test_transformer_api():
    x = np.random.default_rng(4).random((3, 1, 8, 8))
    pre = clone(Preprocessor())
    np.testing.assert_allclose(pre.fit_transform(x), preprocess_batch(x))
    assert pre.get_params() == {}
    with pytest.raises(ValueError):
        pre.transform(np.array([1.0, np.nan]))
