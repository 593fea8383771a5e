"""Foreground masks from the "colored regions are foreground" heuristic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError


@dataclass(frozen=True)
class ForegroundPolicy:
    """How semantic matching decides which cells take part.

    ``fill_holes`` closes regions enclosed by foreground pixels, so a line
    drawing's interior counts as foreground. ``restrict_reference`` limits
    candidate reference patches to the reference's own foreground (falling
    back to every patch when that foreground is empty).
    """

    chroma_threshold: float = 0.06
    white_threshold: float = 0.97
    fill_holes: bool = True
    restrict_reference: bool = True
    enabled: bool = True


def extract_foreground_mask(image: np.ndarray, chroma_threshold: float = 0.06,
                            white_threshold: float = 0.97) -> np.ndarray:
    """1 where a pixel is colored or dark, 0 where it is near-white and gray."""
    image = np.asarray(image)
    mx = image.max(axis=-1)
    mn = image.min(axis=-1)
    return (((mx - mn) > chroma_threshold) | (mn < white_threshold)).astype(np.uint8)


def policy_mask(image: np.ndarray, policy: ForegroundPolicy) -> np.ndarray:
    """Pixel-level foreground of ``image`` under ``policy``."""
    if not policy.enabled:
        return np.ones(image.shape[:2], dtype=np.uint8)
    mask = extract_foreground_mask(image, policy.chroma_threshold, policy.white_threshold)
    if policy.fill_holes:
        mask = ndimage.binary_fill_holes(mask).astype(np.uint8)
    return mask


def downsample_mask(mask: np.ndarray, delta: int) -> np.ndarray:
    """Block-majority vote onto a grid of delta x delta cells; ties go to foreground."""
    h, w = mask.shape
    if h % delta or w % delta:
        raise DimensionError(f"mask shape {(h, w)} not divisible by {delta}")
    blocks = mask.reshape(h // delta, delta, w // delta, delta).astype(np.int64)
    votes = blocks.sum(axis=(1, 3))
    return (2 * votes >= delta * delta).astype(np.uint8)
