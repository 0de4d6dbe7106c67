"""Condition images: high-pass filter, edge-map variant, low-pass reference.

The condition is computed on luminance (channel mean), so hue is removed
before frequency filtering. All convolutions use reflect padding to avoid
dark borders that would leak modality cues. Conditions are single-channel
arrays [B, 1, H, W]; the high-pass residual is clipped to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import as_array
from .errors import ConfigError

HIGHPASS = "highpass_gaussian"
EDGE = "edge_gradient"
LOWPASS = "lowpass_gaussian"

# default blur scale in pixels, chosen for 32-px-high toy images
BASE_SIGMA = 2.0
BASE_HEIGHT = 32


@dataclass(frozen=True)
class FilterConfig:
    kind: str = HIGHPASS
    sigma: float = BASE_SIGMA
    normalize: bool = False

    def check(self, expected_kind: str | None = None) -> None:
        if self.kind not in (HIGHPASS, EDGE, LOWPASS):
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"filter sigma must be finite and positive, got {self.sigma}")
        if expected_kind is not None and self.kind != expected_kind:
            raise ConfigError(f"filter kind {self.kind!r} where {expected_kind!r} is required")


def scaled_sigma(height: int) -> float:
    """Blur scale proportional to image height (2.0 px at height 32)."""
    return BASE_SIGMA * height / BASE_HEIGHT


def luminance(x) -> np.ndarray:
    """Channel-mean luminance, [B,C,H,W] -> [B,1,H,W]; identity for 1 channel."""
    x = as_array(x)
    if x.ndim != 4:
        raise ValueError(f"expected [B,C,H,W], got shape {x.shape}")
    if x.shape[1] == 1:
        return x.astype(np.float32, copy=False)
    return x.mean(axis=1, keepdims=True, dtype=np.float64).astype(np.float32)


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel 2-D Gaussian blur with reflect boundary handling."""
    # sigma 0 on batch/channel axes: blur spatial dims only
    return ndimage.gaussian_filter(
        np.asarray(x, dtype=np.float64), sigma=(0, 0, sigma, sigma), mode="reflect"
    ).astype(np.float32)


def high_pass_condition(x, cfg: FilterConfig) -> np.ndarray:
    """Blur-subtraction high-pass of the luminance: c = L(x) - blur(L(x))."""
    cfg.check(HIGHPASS)
    lum = luminance(x)
    c = lum - gaussian_blur(lum, cfg.sigma)
    if cfg.normalize:
        peak = np.abs(c).max(axis=(1, 2, 3), keepdims=True)
        c = np.divide(c, peak, out=np.zeros_like(c), where=peak > 0)
    return np.clip(c, -1.0, 1.0)


def edge_condition(x, cfg: FilterConfig) -> np.ndarray:
    """Gradient-magnitude edge map, max-normalized to [0,1] then shifted to [-1,1].

    A flat input has no edges anywhere, so its map sits at the shifted
    floor of -1.
    """
    cfg.check(EDGE)
    lum = luminance(x).astype(np.float64)
    gy, gx = np.gradient(lum, axis=(2, 3))
    mag = np.hypot(gx, gy)
    peak = mag.max(axis=(1, 2, 3), keepdims=True)
    mag = np.divide(mag, peak, out=np.zeros_like(mag), where=peak > 0)
    return (2.0 * mag - 1.0).astype(np.float32)


def low_pass_reference(x, cfg: FilterConfig) -> np.ndarray:
    """Per-channel Gaussian blur; keeps color and intensity statistics."""
    cfg.check(LOWPASS)
    return gaussian_blur(as_array(x), cfg.sigma)


def condition_for(x, cfg: FilterConfig) -> np.ndarray:
    """Dispatch to the condition filter named by the config."""
    if cfg.kind == HIGHPASS:
        return high_pass_condition(x, cfg)
    if cfg.kind == EDGE:
        return edge_condition(x, cfg)
    raise ConfigError(f"{cfg.kind!r} is not a condition filter (use high-pass or edge)")
