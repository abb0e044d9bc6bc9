"""Photometric domain shift applied to target-domain images.

The shift is deliberately content-preserving: geometry and layout stay
identical, only the imaging changes (per-channel gamma, contrast, blur,
sensor noise, and a low-frequency texture overlay).  The all-identity
configuration returns the input bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError

_NOISE_SALT = 0x5E1F
_TEXTURE_SALT = 0x7E87


@dataclass(frozen=True)
class ShiftConfig:
    color_gamma: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    contrast: float = 1.0
    texture_overlay_strength: float = 0.0
    seed: int = 0

    def validate(self):
        if any(g <= 0 for g in self.color_gamma):
            raise ConfigError(f"color_gamma must be positive, got {self.color_gamma}")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ConfigError(f"noise_sigma must be in [0, 0.1], got {self.noise_sigma}")
        if not 0.0 <= self.blur_radius <= 2.0:
            raise ConfigError(f"blur_radius must be in [0, 2], got {self.blur_radius}")
        if not 0.6 <= self.contrast <= 1.4:
            raise ConfigError(f"contrast must be in [0.6, 1.4], got {self.contrast}")
        if not 0.0 <= self.texture_overlay_strength <= 0.5:
            raise ConfigError(
                f"texture_overlay_strength must be in [0, 0.5], got {self.texture_overlay_strength}"
            )
        if self.seed < 0:
            raise ConfigError("shift seed must be nonnegative")
        return self

    @property
    def is_identity(self):
        return (
            tuple(self.color_gamma) == (1.0, 1.0, 1.0)
            and self.noise_sigma == 0.0
            and self.blur_radius == 0.0
            and self.contrast == 1.0
            and self.texture_overlay_strength == 0.0
        )

    def with_sample_seed(self, sample_seed: int) -> "ShiftConfig":
        """Derive a per-sample config so noise fields differ across a dataset."""
        derived = int(np.random.SeedSequence([self.seed, int(sample_seed)]).generate_state(1)[0])
        return replace(self, seed=derived)


def _texture_field(shape, seed):
    """Smooth pseudo-texture in [0, 1] built from a few random sinusoids."""
    h, w = shape
    rng = np.random.default_rng([seed, _TEXTURE_SALT])
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    acc = np.zeros((h, w))
    k = 4
    for _ in range(k):
        fx, fy = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        acc += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return 0.5 + acc / (2 * k)


def apply_domain_shift(img: np.ndarray, cfg: ShiftConfig) -> np.ndarray:
    """Shift an RGB image in [0,1]; deterministic in (img, cfg)."""
    cfg.validate()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if cfg.is_identity:
        return img.copy()

    out = img.astype(np.float32, copy=True)
    if tuple(cfg.color_gamma) != (1.0, 1.0, 1.0):
        gamma = np.asarray(cfg.color_gamma, dtype=np.float32)
        out = np.power(out, gamma[None, None, :])
    if cfg.contrast != 1.0:
        out = 0.5 + (out - 0.5) * np.float32(cfg.contrast)
    if cfg.blur_radius > 0.0:
        out = gaussian_filter(out, sigma=(cfg.blur_radius, cfg.blur_radius, 0.0), mode="nearest")
    if cfg.noise_sigma > 0.0:
        rng = np.random.default_rng([cfg.seed, _NOISE_SALT])
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape).astype(np.float32)
    if cfg.texture_overlay_strength > 0.0:
        field = _texture_field(out.shape[:2], cfg.seed).astype(np.float32)
        out = out + cfg.texture_overlay_strength * (field[..., None] - 0.5)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
