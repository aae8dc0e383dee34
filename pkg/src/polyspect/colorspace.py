"""Color conversions and exposure calculators.

All conversions are vectorized: they accept a single pixel ``(3,)`` or any
array shaped ``(..., 3)`` and return float64 results. Channel values stay
real-valued; quantization to 8-bit happens only at file export.
"""

import math

import numpy as np

__all__ = [
    "rgb_to_ycbcr",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "luminance",
    "absolute_ev",
    "luminous_exposure",
]


def _as_channels(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.shape[-1] != 3:
        raise ValueError(f"expected trailing channel axis of size 3, got shape {a.shape}")
    return a


def luminance(rgb) -> np.ndarray:
    """BT.601 luma of an RGB array, in 0..255 units."""
    a = _as_channels(rgb)
    return 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]


def rgb_to_ycbcr(rgb) -> np.ndarray:
    """Full-range BT.601 RGB -> YCbCr, channels clamped to [0, 255].

    y  = 0.299 r + 0.587 g + 0.114 b
    cb = 128 - 0.168736 r - 0.331264 g + 0.5 b
    cr = 128 + 0.5 r - 0.418688 g - 0.081312 b

    Terms are grouped as channel differences so that any gray input maps to
    (g, 128, 128) exactly, not merely to within rounding.
    """
    a = _as_channels(rgb)
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    y = 0.299 * (r - g) + 0.114 * (b - g) + g
    cb = 128.0 - 0.168736 * (r - b) - 0.331264 * (g - b)
    cr = 128.0 + 0.418688 * (r - g) + 0.081312 * (r - b)
    out = np.stack([y, cb, cr], axis=-1)
    return np.clip(out, 0.0, 255.0)


def rgb_to_hsv(rgb) -> np.ndarray:
    """Hexcone RGB -> HSV with h in degrees [0, 360), s and v in [0, 1].

    Achromatic pixels (max == min) get h = 0; black gets s = 0 as well.
    """
    a = _as_channels(rgb)
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc

    v = maxc / 255.0
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
        safe = np.where(delta > 0, delta, 1.0)
        h_r = np.mod((g - b) / safe, 6.0)
        h_g = (b - r) / safe + 2.0
        h_b = (r - g) / safe + 4.0
    h = np.where(maxc == r, h_r, np.where(maxc == g, h_g, h_b))
    h = np.where(delta > 0, 60.0 * h, 0.0)
    h = np.mod(h, 360.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse hexcone HSV -> RGB in 0..255 floats (no quantization)."""
    a = _as_channels(hsv)
    h = np.mod(a[..., 0], 360.0) / 60.0
    s = np.clip(a[..., 1], 0.0, 1.0)
    v = np.clip(a[..., 2], 0.0, 1.0)

    c = v * s
    x = c * (1.0 - np.abs(np.mod(h, 2.0) - 1.0))
    m = v - c
    z = np.zeros_like(c)

    sector = np.floor(h).astype(int) % 6
    r = np.choose(sector, [c, x, z, z, x, c])
    g = np.choose(sector, [x, c, c, x, z, z])
    b = np.choose(sector, [z, z, x, c, c, x])
    return (np.stack([r, g, b], axis=-1) + m[..., None]) * 255.0


def absolute_ev(aperture_n: float, shutter_s: float, iso: float) -> float:
    """Absolute exposure value: log2(n^2 / t) + log2(iso / 100)."""
    if aperture_n <= 0 or shutter_s <= 0 or iso <= 0:
        raise ValueError("aperture, shutter time and ISO must all be positive")
    return math.log2(aperture_n**2 / shutter_s) + math.log2(iso / 100.0)


def luminous_exposure(lux: float, shutter_s: float) -> float:
    """Luminous exposure in lux-seconds: illuminance times integration time."""
    if lux < 0 or shutter_s < 0:
        raise ValueError("illuminance and shutter time must be nonnegative")
    return lux * shutter_s
