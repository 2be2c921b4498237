"""Input perturbations and CutMix mixing.

Photometric ops only (brightness shift, contrast scale, additive Gaussian
noise) so images and pixel-wise label maps always stay aligned; geometric
transforms are deliberately absent. CutMix masks are axis-aligned
rectangles of half the image area, fully contained in the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class AugmentPolicy:
    """Strengths for the weak/strong photometric perturbations.

    At strength ``s`` the ops draw, per image: contrast factor in
    ``1 ± s*contrast``, brightness shift in ``± s*brightness``, then add
    per-pixel Gaussian noise with sigma ``s*noise_sigma`` (in that order).
    Strength 0 is the exact identity.
    """

    weak_strength: float = 0.2
    strong_strength: float = 1.0
    brightness: float = 0.25
    contrast: float = 0.5
    noise_sigma: float = 0.08

    def strength(self, level: str) -> float:
        if level == "weak":
            return self.weak_strength
        if level == "strong":
            return self.strong_strength
        raise InputError(f"level must be 'weak' or 'strong', got {level!r}")


@dataclass(frozen=True)
class CutMixMask:
    """Binary rectangle mask; 1 inside ``rect = (top, left, height, width)``."""

    m: np.ndarray
    rect: tuple[int, int, int, int]


def photometric(x: np.ndarray, policy: AugmentPolicy, level: str,
                rng: np.random.Generator) -> np.ndarray:
    """Photometric perturbation of an image batch; output clamped to [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    s = policy.strength(level)
    if s == 0.0:
        return x.copy()
    n = x.shape[0]
    extra = (1,) * (x.ndim - 1)
    contrast = rng.uniform(1.0 - s * policy.contrast, 1.0 + s * policy.contrast,
                           size=(n,) + extra)
    brightness = rng.uniform(-s * policy.brightness, s * policy.brightness,
                             size=(n,) + extra)
    y = 0.5 + (x - 0.5) * contrast + brightness
    if policy.noise_sigma > 0:
        y = y + rng.normal(0.0, s * policy.noise_sigma, size=x.shape)
    return np.clip(y, 0.0, 1.0)


def sample_rect_mask(h_img: int, w_img: int, rng: np.random.Generator) -> CutMixMask:
    """Sample a half-area rectangle mask, position uniform over valid placements.

    Height is uniform over the feasible range and width is ``round(area/h)``,
    so the mask sum matches ``round(0.5*H*W)`` up to integer rounding.
    """
    if h_img < 2 or w_img < 2:
        raise InputError(f"mask needs H, W >= 2, got {h_img}x{w_img}")
    area = round(0.5 * h_img * w_img)
    hmin, hmax = ceil(area / w_img), min(h_img, area)
    h = int(rng.integers(hmin, hmax + 1))
    w = int(min(w_img, max(1, round(area / h))))
    top = int(rng.integers(0, h_img - h + 1))
    left = int(rng.integers(0, w_img - w + 1))
    m = np.zeros((h_img, w_img))
    m[top:top + h, left:left + w] = 1.0
    return CutMixMask(m=m, rect=(top, left, h, w))


def _mask_array(m, hw: tuple[int, int], what: str) -> np.ndarray:
    """Validate an (H,W) or (N,H,W) mask against a target spatial shape."""
    mm = m.m if isinstance(m, CutMixMask) else np.asarray(m, dtype=np.float64)
    if mm.ndim not in (2, 3) or mm.shape[-2:] != hw:
        raise InputError(f"mask shape {mm.shape} does not match {what} {hw}")
    return mm


def mix_images(x1: np.ndarray, x2: np.ndarray, m) -> np.ndarray:
    """Pixelwise ``m*x1 + (1-m)*x2``; ``m`` may be (H,W) or (N,H,W)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise InputError(f"image shape mismatch: {x1.shape} vs {x2.shape}")
    mm = _mask_array(m, x1.shape[1:3], "images")
    return mm[..., None] * x1 + (1.0 - mm[..., None]) * x2


def _check_onehot(y: np.ndarray, name: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=-1) == 1.0):
        raise InputError(f"{name} is not one-hot per pixel")
    return y


def mix_label_maps(y1: np.ndarray, y2: np.ndarray, m) -> np.ndarray:
    """CutMix of one-hot label maps: ``y1`` inside the rect, ``y2`` outside."""
    y1 = _check_onehot(y1, "y1")
    y2 = _check_onehot(y2, "y2")
    if y1.shape != y2.shape:
        raise InputError(f"label shape mismatch: {y1.shape} vs {y2.shape}")
    mm = _mask_array(m, y1.shape[-3:-1], "labels")
    return mm[..., None] * y1 + (1.0 - mm[..., None]) * y2


def mix_valid_masks(v1: np.ndarray, v2: np.ndarray, m) -> np.ndarray:
    """Mix threshold gates with the same rectangle as their label maps."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    mm = _mask_array(m, v1.shape[-2:], "valid masks")
    return mm * v1 + (1.0 - mm) * v2
