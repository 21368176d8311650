"""sRGB -> CIE L*a*b* conversion (D65 white, standard sRGB transfer curve)."""

import numpy as np

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# the D65 white point is the image of RGB (1, 1, 1)
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_EPS = (6.0 / 29.0) ** 3


def _f(t):
    return np.where(t > _EPS, np.cbrt(t), t / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)


def rgb_to_lab(image):
    """Convert an sRGB image to Lab planes.

    ``image`` is (..., 3): uint8 values in [0, 255], or floats already in
    [0, 1]. Returns float64 (..., 3) with L in [0, 100] and a, b roughly in
    [-128, 127].
    """
    img = np.asarray(image)
    if img.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis of size 3, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        c = img.astype(np.float64) / 255.0
    else:
        c = img.astype(np.float64)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b], axis=-1)


def lab_planes(image):
    """Normalized network inputs: L/100 as (..., 1) and ab/128 as (..., 2)."""
    lab = rgb_to_lab(image)
    return lab[..., :1] / 100.0, lab[..., 1:] / 128.0
