"""sRGB (8-bit) to CIELAB conversion under the D65 white point."""
import numpy as np

# linear sRGB -> XYZ, D65
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
# white point taken from the matrix so that r=g=b lands exactly on the gray axis
WHITE_XYZ = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def srgb_to_linear(v):
    """Inverse sRGB companding for values in [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


# one entry per 8-bit code value; identical inputs give identical outputs
_LINEAR_LUT = srgb_to_linear(np.arange(256) / 255.0)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def rgb_to_cielab(img, dtype=np.float64) -> np.ndarray:
    """Convert an ``(H, W, 3)`` uint8 sRGB image to ``(H, W, 3)`` L*a*b*.

    L lies in [0, 100]; a and b stay within +-128 for every 8-bit input.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected 8-bit sRGB, got {img.dtype}")
    lin = _LINEAR_LUT[img]
    xyz = lin @ SRGB_TO_XYZ.T
    fx, fy, fz = (_f(xyz[..., i] / WHITE_XYZ[i]) for i in range(3))
    lab = np.empty(img.shape, dtype=np.float64)
    lab[..., 0] = np.clip(116.0 * fy - 16.0, 0.0, 100.0)
    lab[..., 1] = 500.0 * (fx - fy)
    lab[..., 2] = 200.0 * (fy - fz)
    return lab.astype(dtype, copy=False)
