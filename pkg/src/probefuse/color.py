"""Exposure scaling, sRGB transfer and luminance."""

from __future__ import annotations

import numpy as np

# Exposure brackets used for both synthetic observations and fusion defaults.
DEFAULT_EVS = (0, -3, -6, -9, -12)

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

_LIN_BREAK = 0.0031308
_ENC_BREAK = 0.04045


def apply_exposure(rgb, ev):
    """Scale linear radiance by ``2 ** ev``. No clipping."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if float(ev).is_integer():
        # ldexp is exact for power-of-two scaling
        return np.ldexp(rgb, int(ev))
    return rgb * 2.0 ** ev


def srgb_encode(linear, clip: bool = True) -> np.ndarray:
    """IEC 61966-2-1 transfer from linear to display values.

    With ``clip`` (the default) negative input is treated as black and the
    result is clipped to [0, 1], which is how saturated LDR observations are
    modeled. ``clip=False`` continues the power segment above 1 so that
    over-exposed predictions stay differentiable.
    """
    x = np.maximum(np.asarray(linear, dtype=np.float64), 0.0)
    out = np.where(x <= _LIN_BREAK, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def srgb_encode_grad(linear) -> np.ndarray:
    """Derivative of the unclipped :func:`srgb_encode` w.r.t. its input."""
    x = np.maximum(np.asarray(linear, dtype=np.float64), 0.0)
    safe = np.maximum(x, _LIN_BREAK)
    return np.where(x <= _LIN_BREAK, 12.92, (1.055 / 2.4) * np.power(safe, 1.0 / 2.4 - 1.0))


def srgb_decode(encoded) -> np.ndarray:
    """Inverse of :func:`srgb_encode` (never un-clips)."""
    y = np.asarray(encoded, dtype=np.float64)
    return np.where(y <= _ENC_BREAK, y / 12.92, np.power((np.maximum(y, _ENC_BREAK) + 0.055) / 1.055, 2.4))


def luminance(rgb) -> np.ndarray:
    """Rec. 709 relative luminance of linear RGB (last axis)."""
    return np.asarray(rgb, dtype=np.float64) @ LUMA_WEIGHTS
