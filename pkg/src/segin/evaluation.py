"""Diversity, reference-similarity, reconstruction and FID protocols over a pluggable extractor."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .features import FeatureExtractorConfig, FeatureMap, extract_features
from .tensorio import read_segt, write_segt


@dataclass(frozen=True)
class MetricConfig:
    extractor: FeatureExtractorConfig = FeatureExtractorConfig()
    n_inputs: int = 100
    pairs_per_input: int = 19
    n_references: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.pairs_per_input < 1:
            raise ConfigError("pairs_per_input must be >= 1")
        if self.n_inputs < 1 or self.n_references < 1:
            raise ConfigError("n_inputs and n_references must be >= 1")


def _unit_rows(f: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(f, axis=-1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0)


def perceptual_distance(a: np.ndarray, b: np.ndarray,
                        extractor: FeatureExtractorConfig = FeatureExtractorConfig()) -> float:
    """Mean Euclidean distance between per-position unit-normalized features (zero stays zero)."""
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    fa = _unit_rows(extract_features(a, extractor).data.astype(np.float64))
    fb = _unit_rows(extract_features(b, extractor).data.astype(np.float64))
    d = np.linalg.norm(fa - fb, axis=-1)
    return math.fsum(d.ravel()) / d.size


def _sqrtm_psd(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _check_sigma(s: np.ndarray, name: str) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] != s.shape[1]:
        raise InputError(f"{name} must be square, got {s.shape}")
    if not np.allclose(s, s.T, rtol=1e-7, atol=1e-10):
        raise InputError(f"{name} is not symmetric")
    return (s + s.T) / 2.0


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) via symmetric eigendecompositions.

    Tr((S1 S2)^(1/2)) is computed as the trace of sqrt(sqrt(S1) S2 sqrt(S1)),
    which has the same eigenvalues and stays symmetric; negative eigenvalues
    from round-off are clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = _check_sigma(sigma1, "sigma1"), _check_sigma(sigma2, "sigma2")
    if not (mu1.shape == mu2.shape and s1.shape == s2.shape and s1.shape[0] == mu1.shape[0]):
        raise DimensionError("mean/covariance dimensions do not match")
    r1 = _sqrtm_psd(s1)
    m = r1 @ s2 @ r1
    cross = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2.0), 0.0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross
    return float(max(value, 0.0))


def image_features(images: Sequence[np.ndarray], extractor: FeatureExtractorConfig) -> np.ndarray:
    """(N, C) spatially mean-pooled features."""
    return np.stack([extract_features(im, extractor).data.astype(np.float64).mean(axis=(0, 1))
                     for im in images])


def feature_statistics(feats: np.ndarray, shrinkage: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    n, dim = feats.shape
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False).reshape(dim, dim) if n > 1 else np.zeros((dim, dim))
    if n < dim + 1:
        sigma = sigma + shrinkage * np.eye(dim)
    return mu, sigma


def save_statistics(path, mu: np.ndarray, sigma: np.ndarray) -> None:
    """(mu, sigma) as one SEGT tensor of shape (dim, dim + 1, 1); column 0 holds mu."""
    dim = mu.shape[0]
    data = np.concatenate([mu[:, None], sigma], axis=1).reshape(dim, dim + 1, 1)
    write_segt(path, data, (dim, dim + 1))


def load_statistics(path) -> tuple[np.ndarray, np.ndarray]:
    data, _ = read_segt(path)
    data = data[:, :, 0].astype(np.float64)
    return data[:, 0], data[:, 1:]


def fid_score(generated: Sequence[np.ndarray], real: Sequence[np.ndarray],
              extractor: FeatureExtractorConfig = FeatureExtractorConfig()) -> float:
    if len(generated) == 0 or len(real) == 0:
        raise ConfigError("FID needs non-empty generated and real sets")
    mu1, s1 = feature_statistics(image_features(generated, extractor))
    mu2, s2 = feature_statistics(image_features(real, extractor))
    return frechet_distance(mu1, s1, mu2, s2)


# protocols ----------------------------------------------------------------

def _model(checkpoint):
    from .trainer import load_model

    return load_model(checkpoint)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def diversity_score(checkpoint, inputs: Sequence[np.ndarray], references: Sequence[np.ndarray],
                    cfg: MetricConfig = MetricConfig()) -> float:
    """Average distance between outputs of the same input under two different references."""
    if len(references) < 2:
        raise ConfigError("diversity needs a reference pool of at least 2 images")
    if not inputs:
        raise ConfigError("empty test set")
    model = _model(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    xs, ra, rb = [], [], []
    for x in list(inputs)[:cfg.n_inputs]:
        for _ in range(cfg.pairs_per_input):
            i, j = rng.choice(len(references), size=2, replace=False)
            xs.append(x)
            ra.append(references[i])
            rb.append(references[j])
    out_a = model.translate_batch(xs, ra)[0]
    out_b = model.translate_batch(xs, rb)[0]
    return _mean(perceptual_distance(a, b, cfg.extractor) for a, b in zip(out_a, out_b))


def similarity_to_reference(checkpoint, inputs: Sequence[np.ndarray], references: Sequence[np.ndarray],
                            cfg: MetricConfig = MetricConfig()) -> float:
    """Average distance between each output and the reference that guided it.

    A pool of ``n_references`` references is drawn once; each input then
    gets one reference from the pool, uniformly at random.
    """
    if not inputs:
        raise ConfigError("empty test set")
    if not references:
        raise ConfigError("empty reference set")
    model = _model(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    pool = rng.choice(len(references), size=min(cfg.n_references, len(references)), replace=False)
    xs = list(inputs)[:cfg.n_inputs]
    rs = [references[int(pool[rng.integers(len(pool))])] for _ in xs]
    outs = model.translate_batch(xs, rs)[0]
    return _mean(perceptual_distance(o, r, cfg.extractor) for o, r in zip(outs, rs))


def reconstruction_score(checkpoint, pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                         cfg: MetricConfig = MetricConfig()) -> float:
    """Average distance between the output guided by the ground truth and that ground truth."""
    if not pairs:
        raise ConfigError("empty test set")
    for p in pairs:
        if len(p) != 2 or np.shape(p[0]) != np.shape(p[1]):
            raise ConfigError("reconstruction needs paired (x, y) samples of equal size")
    model = _model(checkpoint)
    sel = list(pairs)[:cfg.n_inputs]
    outs = model.translate_batch([p[0] for p in sel], [p[1] for p in sel])[0]
    return _mean(perceptual_distance(o, p[1], cfg.extractor) for o, p in zip(outs, sel))


def translated_fid(checkpoint, pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                   cfg: MetricConfig = MetricConfig()) -> float:
    """FID between outputs guided by random test references and the real targets."""
    if not pairs:
        raise ConfigError("empty test set")
    model = _model(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    sel = list(pairs)[:cfg.n_inputs]
    targets = [p[1] for p in pairs]
    refs = [targets[int(rng.integers(len(targets)))] for _ in sel]
    outs = model.translate_batch([p[0] for p in sel], refs)[0]
    return fid_score(outs, [p[1] for p in sel], cfg.extractor)


def metric_report(metric: str, value: float, n: int, cfg: MetricConfig) -> dict:
    return {"metric": metric, "value": float(value), "n": int(n), "seed": int(cfg.seed),
            "extractor": asdict(cfg.extractor)}


def write_report(path, reports) -> None:
    with open(path, "w") as fh:
        json.dump(reports, fh, indent=1, sort_keys=True)
