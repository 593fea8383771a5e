"""Frozen feature extractors standing in for a pretrained backbone.

Three kinds are available:

* ``toy-conv``: a fixed random convolution stack, deterministic per seed.
* ``color-pool``: channel-preserving average pooling of the RGB image.
* ``precomputed``: features loaded from SEGT files in a directory, keyed by
  the SHA-1 digest of the image's float32 bytes (see :func:`image_key`).
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, InputError
from .tensorio import read_segt, write_segt

KINDS = ("toy-conv", "color-pool", "precomputed")


@dataclass(frozen=True)
class FeatureExtractorConfig:
    kind: str = "toy-conv"
    seed: int = 0
    downsample_factor: int = 4
    channels: int = 16
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown extractor kind {self.kind!r}; expected one of {KINDS}")
        if self.downsample_factor < 1:
            raise InputError("downsample_factor must be a positive integer")
        if self.kind == "precomputed" and not self.path:
            raise InputError("precomputed extractor needs a feature directory path")


@dataclass
class FeatureMap:
    """Dense (H_f, W_f, C) features of an image of size ``source_image_shape``."""

    data: np.ndarray
    source_image_shape: tuple[int, int]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"feature map must be (H_f, W_f, C) with all sides >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError("feature map contains non-finite values")
        h, w = self.source_image_shape
        hf, wf = self.data.shape[:2]
        if h % hf or w % wf or h // hf != w // wf:
            raise DimensionError(
                f"source shape {(h, w)} is not a common integer multiple of grid {(hf, wf)}")
        self.source_image_shape = (int(h), int(w))

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def delta(self) -> int:
        return self.source_image_shape[0] // self.data.shape[0]

    def save(self, path) -> None:
        write_segt(path, self.data, self.source_image_shape)

    @classmethod
    def load(cls, path) -> "FeatureMap":
        data, shape = read_segt(path)
        return cls(data, shape)


class ColorPool(nn.Module):
    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return F.avg_pool2d(x, self.factor)


class ToyConv(nn.Module):
    """Two reflect-padded 3x3 conv + ReLU layers followed by average pooling."""

    def __init__(self, factor: int, channels: int, seed: int):
        super().__init__()
        self.factor = factor
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        self.requires_grad_(False)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        return F.avg_pool2d(h, self.factor)


@lru_cache(maxsize=16)
def build_extractor(cfg: FeatureExtractorConfig) -> nn.Module:
    """Return the frozen torch module for ``cfg`` (cached per config)."""
    if cfg.kind == "color-pool":
        module = ColorPool(cfg.downsample_factor)
    elif cfg.kind == "toy-conv":
        module = ToyConv(cfg.downsample_factor, cfg.channels, cfg.seed)
    else:
        raise InputError("precomputed features cannot be applied to new images")
    return module.eval().requires_grad_(False)


def apply_extractor(images: torch.Tensor, cfg: FeatureExtractorConfig) -> torch.Tensor:
    """Differentiable features of an NCHW batch; gradients flow to ``images`` only."""
    module = build_extractor(cfg)
    if images.dtype != torch.float32:
        module = _as_dtype(cfg, images.dtype)
    return module(images)


@lru_cache(maxsize=16)
def _as_dtype(cfg, dtype):
    import copy

    return copy.deepcopy(build_extractor(cfg)).to(dtype)


def image_key(image: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


def save_precomputed(image: np.ndarray, features: np.ndarray, directory) -> str:
    """Store externally computed features for ``image``; returns the file path."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, image_key(image) + ".segt")
    write_segt(path, features, image.shape[:2])
    return path


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if np.isnan(image).any():
        raise InputError("image contains NaN")
    return image


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array to a (1, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def extract_features(image: np.ndarray, cfg: FeatureExtractorConfig) -> FeatureMap:
    image = _check_image(image)
    h, w = image.shape[:2]
    f = cfg.downsample_factor
    if h % f or w % f:
        raise DimensionError(f"image size {(h, w)} is not divisible by downsample factor {f}")
    if cfg.kind == "precomputed":
        path = os.path.join(cfg.path, image_key(image) + ".segt")
        if not os.path.exists(path):
            raise InputError(f"no precomputed features for this image at {path}")
        fm = FeatureMap.load(path)
        if fm.source_image_shape != (h, w):
            raise DimensionError(f"precomputed features at {path} belong to a {fm.source_image_shape} image")
        return fm
    with torch.no_grad():
        out = apply_extractor(to_tensor(image), cfg)
    return FeatureMap(out[0].permute(1, 2, 0).numpy().copy(), (h, w))
