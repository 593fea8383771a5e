"""Training objectives. All take NCHW tensors and return scalar tensors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .errors import DimensionError, InputError
from .features import FeatureExtractorConfig, apply_extractor

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    recon: float = 100.0
    feature: float = 5e-6
    gan: float = 1.0
    seg: float = 100.0
    seg_att: float = 10.0
    tv: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise InputError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def replace(self, **kw) -> "LossWeights":
        return LossWeights(**{**asdict(self), **kw})


@dataclass
class LossReport:
    recon: float = 0.0
    feature: float = 0.0
    gan_g: float = 0.0
    gan_d: float = 0.0
    seg: float = 0.0
    seg_att: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("recon", "feature", "gan_g", "gan_d", "seg", "seg_att", "tv", "total")

    def csv_row(self, step: int) -> list:
        return [step] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(y_hat, y)
    return (y_hat - y).abs().mean()


def feature_loss(y_hat: torch.Tensor, y: torch.Tensor,
                 extractor: FeatureExtractorConfig = FeatureExtractorConfig()) -> torch.Tensor:
    _same_shape(y_hat, y)
    with torch.no_grad():
        target = apply_extractor(y, extractor)
    return (apply_extractor(y_hat, extractor) - target).abs().mean()


def _check_probs(p: torch.Tensor):
    if not torch.isfinite(p).all():
        raise FloatingPointError("non-finite discriminator output")
    if (p < 0).any() or (p > 1).any():
        raise FloatingPointError("discriminator output outside [0, 1]")


def gan_loss_d(d_real: torch.Tensor, d_fake: torch.Tensor, labels_flipped: bool = False) -> torch.Tensor:
    """Binary cross-entropy of the discriminator; flipping swaps the real/fake targets."""
    _check_probs(d_real)
    _check_probs(d_fake)
    if labels_flipped:
        d_real, d_fake = 1 - d_real, 1 - d_fake
    real = -torch.log(d_real.clamp(EPS, 1 - EPS))
    fake = -torch.log((1 - d_fake).clamp(EPS, 1 - EPS))
    return real.mean() + fake.mean()


def gan_loss_g(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, mean of -log D(fake)."""
    _check_probs(d_fake)
    return -torch.log(d_fake.clamp(EPS, 1 - EPS)).mean()


def _safe_sqrt(s: torch.Tensor) -> torch.Tensor:
    # zero value and zero gradient where s == 0
    pos = s > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, s, torch.ones_like(s))), torch.zeros_like(s))


def tv_loss(y_hat: torch.Tensor) -> torch.Tensor:
    """sqrt(row-diff^2 + col-diff^2) summed over channels, averaged over pixels.

    Differences that would step past the last row/column count as zero.
    Accepts (H, W), (C, H, W) or (N, C, H, W).
    """
    y = y_hat
    while y.dim() < 4:
        y = y.unsqueeze(0)
    n, c, h, w = y.shape
    dh = torch.zeros_like(y)
    dv = torch.zeros_like(y)
    dh[:, :, :-1, :] = y[:, :, 1:, :] - y[:, :, :-1, :]
    dv[:, :, :, :-1] = y[:, :, :, 1:] - y[:, :, :, :-1]
    return _safe_sqrt(dh * dh + dv * dv).sum() / (n * h * w)


def seg_loss(seg_hat: torch.Tensor, y_seg: torch.Tensor) -> torch.Tensor:
    _same_shape(seg_hat, y_seg)
    return (seg_hat - y_seg).abs().mean()


def seg_att_loss(seg_hat: torch.Tensor, y_hat: torch.Tensor, y_seg: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """L1 between mask-weighted prediction and mask-weighted target (masks broadcast over channels)."""
    _same_shape(y_hat, y)
    _same_shape(seg_hat, y_seg)
    a, b = seg_hat * y_hat, y_seg * y
    if a.shape != y.shape:
        raise DimensionError("segmentation masks do not broadcast to the image shape")
    return (a - b).abs().mean()


TOTAL_TERMS = (("recon", "recon"), ("feature", "feature"), ("gan_g", "gan"),
               ("seg", "seg"), ("seg_att", "seg_att"), ("tv", "tv"))


def total_loss(components, w: LossWeights = LossWeights()):
    """Weighted sum of the six generator terms.

    ``components`` is a LossReport or a mapping with keys recon, feature,
    gan_g, seg, seg_att, tv; values may be floats or tensors.
    """
    get = components.get if isinstance(components, dict) else (lambda k, d=0.0: getattr(components, k))
    total = 0.0
    for key, wname in TOTAL_TERMS:
        v = get(key, 0.0)
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if math.isnan(fv) or math.isinf(fv):
            raise FloatingPointError(f"loss term {key!r} is not finite ({fv})")
        total = total + getattr(w, wname) * v
    return total
