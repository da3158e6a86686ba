"""Input validation shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError


def as_image_batch(X, image_shape=None):
    """Validate a ``(n, 3, H, W)`` batch of [0, 1] images and return it as float64."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64,
                    ensure_min_samples=0, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ConfigError(f"expected images of shape (n, 3, H, W), got {X.shape}")
    if image_shape is not None and tuple(X.shape[2:]) != tuple(image_shape):
        raise ConfigError(f"image shape mismatch: expected (3, {image_shape[0]}, {image_shape[1]}), "
                          f"got {tuple(X.shape[1:])}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ConfigError("image pixels must lie in [0, 1]")
    # torch rejects negative strides (e.g. reversed views)
    return np.ascontiguousarray(X)


def check_fraction(name, value, low=0.0, high=1.0, low_open=False, high_open=False):
    ok_low = value > low if low_open else value >= low
    ok_high = value < high if high_open else value <= high
    if not (ok_low and ok_high):
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ConfigError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value}")
