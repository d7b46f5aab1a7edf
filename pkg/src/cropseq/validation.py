"""Input validation helpers shared by the estimators and the CLI."""
import numpy as np

__all__ = ["check_channels", "check_sequences", "check_labels", "check_random_state"]


def check_channels(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ValueError(f"expected arrays whose last two axes are H and W, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_sequences(X, sequence_length=None, in_channels=None):
    """Return ``X`` as float64 ``[n, S, C, H, W]``.

    Single-channel input given as ``[n, S, H, W]`` gets a channel axis.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and in_channels in (None, 1):
        X = X[:, :, None]
    if X.ndim != 5:
        raise ValueError(f"expected sequences shaped [n, S, C, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no sequences given")
    if sequence_length is not None and X.shape[1] != sequence_length:
        raise ValueError(f"expected sequences of length {sequence_length}, got {X.shape[1]}")
    if in_channels is not None and X.shape[2] != in_channels:
        raise ValueError(f"expected {in_channels} channels, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_labels(y, X, n_classes):
    """Return ``y`` as integer ``[n, S, H, W]`` masks aligned with ``X``."""
    y = np.asarray(y)
    expect = X.shape[:2] + X.shape[3:]
    if y.shape != expect:
        raise ValueError(f"labels must have shape {expect}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_random_state(seed):
    """A ``numpy.random.Generator`` from ``None``, an int or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
