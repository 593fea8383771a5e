import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segin.errors import ConfigError, DimensionError, InputError
from segin.evaluation import (MetricConfig, diversity_score, feature_statistics, fid_score,
                              frechet_distance, image_features, load_statistics, metric_report,
                              perceptual_distance, reconstruction_score, save_statistics,
                              similarity_to_reference, write_report)
from segin.features import FeatureExtractorConfig

POOL4 = FeatureExtractorConfig(kind="color-pool", downsample_factor=4)
POOL2 = FeatureExtractorConfig(kind="color-pool", downsample_factor=2)


class EchoReference:
    """Stand-in model that returns its reference untouched."""

    def translate_batch(self, xs, rs):
        return [np.asarray(r) for r in rs], [None] * len(rs), [None] * len(rs)


class CopyInput:
    def translate_batch(self, xs, rs):
        return [np.asarray(x) for x in xs], [None] * len(xs), [None] * len(xs)


def images(n, seed, size=8, shift=0.0):
    rng = np.random.default_rng(seed)
    return [np.clip(rng.random((size, size, 3)) * 0.8 + shift, 0, 1).astype(np.float32) for _ in range(n)]


# perceptual distance --------------------------------------------------------------

def test_perceptual_identity_and_symmetry():
    a, b = images(2, 0)
    assert perceptual_distance(a, a) == 0
    assert perceptual_distance(a, b) == pytest.approx(perceptual_distance(b, a), abs=1e-12)
    with pytest.raises(DimensionError):
        perceptual_distance(a, b[:4])


def test_perceptual_black_vs_white():
    black, white = np.zeros((4, 4, 3), np.float32), np.ones((4, 4, 3), np.float32)
    # zero features normalize to zero; the white unit vector is one away
    assert perceptual_distance(black, white, POOL4) == pytest.approx(1.0)
    assert perceptual_distance(black, white, POOL2) == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_perceptual_pseudometric(seed):
    a, b = images(2, seed)
    d = perceptual_distance(a, b)
    assert d >= 0 and d == pytest.approx(perceptual_distance(b, a), abs=1e-12)


# Frechet distance -----------------------------------------------------------------

def test_frechet_closed_forms():
    eye = np.eye(2)
    assert frechet_distance([0, 0], eye, [0, 0], eye) == pytest.approx(0, abs=1e-6)
    assert frechet_distance([0, 0], eye, [3, 4], eye) == pytest.approx(25, abs=1e-6)
    assert frechet_distance([1, 1], 4 * eye, [1, 1], eye) == pytest.approx(2, abs=1e-6)


def test_frechet_rejects_asymmetric():
    with pytest.raises(InputError):
        frechet_distance([0, 0], np.array([[1, 0.5], [0, 1]]), [0, 0], np.eye(2))
    with pytest.raises(DimensionError):
        frechet_distance([0, 0, 0], np.eye(2), [0, 0], np.eye(2))


def random_gaussian(rng, dim):
    a = rng.normal(size=(dim, dim))
    return rng.normal(size=dim), a @ a.T + 0.1 * np.eye(dim)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_frechet_symmetric_nonnegative(dim, seed):
    rng = np.random.default_rng(seed)
    m1, s1 = random_gaussian(rng, dim)
    m2, s2 = random_gaussian(rng, dim)
    d12 = frechet_distance(m1, s1, m2, s2)
    assert d12 >= 0
    assert d12 == pytest.approx(frechet_distance(m2, s2, m1, s1), rel=1e-8, abs=1e-8)
    assert frechet_distance(m1, s1, m1, s1) == pytest.approx(0, abs=1e-8)


def test_frechet_against_scipy_sqrtm():
    from scipy import linalg

    rng = np.random.default_rng(5)
    m1, s1 = random_gaussian(rng, 5)
    m2, s2 = random_gaussian(rng, 5)
    covmean = linalg.sqrtm(s1 @ s2).real
    ref = np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2 * covmean)
    assert frechet_distance(m1, s1, m2, s2) == pytest.approx(ref, rel=1e-8)


# FID ---------------------------------------------------------------------------

def test_fid_identical_and_symmetric():
    a, b = images(30, 1), images(30, 2, shift=0.2)
    assert fid_score(a, a) == pytest.approx(0, abs=1e-6)
    assert fid_score(a, b) == pytest.approx(fid_score(b, a), rel=1e-9)
    with pytest.raises(ConfigError):
        fid_score([], a)


def test_fid_statistics_replay(tmp_path):
    cfg = FeatureExtractorConfig(kind="toy-conv", seed=4)
    a, b = images(40, 3), images(40, 4, shift=0.15)
    for name, imgs in (("a", a), ("b", b)):
        mu, sigma = feature_statistics(image_features(imgs, cfg))
        save_statistics(tmp_path / f"{name}.segt", mu, sigma)
    ma, sa = load_statistics(tmp_path / "a.segt")
    mb, sb = load_statistics(tmp_path / "b.segt")
    # statistics go through float32 on disk
    assert fid_score(a, b, cfg) == pytest.approx(frechet_distance(ma, (sa + sa.T) / 2, mb, (sb + sb.T) / 2), rel=1e-4)
    assert fid_score(a, b, cfg) > 0


def test_small_set_shrinkage():
    mu, sigma = feature_statistics(np.random.default_rng(0).random((3, 5)))
    assert np.all(np.linalg.eigvalsh(sigma) > 0)


# protocols ---------------------------------------------------------------------

def test_reference_echo_scores_zero():
    xs, rs = images(6, 5), images(4, 6)
    cfg = MetricConfig(n_inputs=6, pairs_per_input=2, n_references=3, seed=1)
    assert similarity_to_reference(EchoReference(), xs, rs, cfg) == 0
    assert reconstruction_score(EchoReference(), list(zip(xs, xs)), cfg) == 0


def test_diversity_identical_references_zero():
    xs = images(3, 7)
    r = images(1, 8)[0]
    cfg = MetricConfig(n_inputs=3, pairs_per_input=4, seed=0)
    assert diversity_score(EchoReference(), xs, [r, r.copy(), r.copy()], cfg) == 0
    assert diversity_score(CopyInput(), xs, images(5, 9), cfg) == 0
    assert diversity_score(EchoReference(), xs, images(5, 9), cfg) > 0


def test_protocol_errors():
    cfg = MetricConfig(n_inputs=2)
    with pytest.raises(ConfigError):
        diversity_score(EchoReference(), images(2, 0), images(1, 1), cfg)
    with pytest.raises(ConfigError, match="empty test set"):
        reconstruction_score(EchoReference(), [], cfg)
    with pytest.raises(ConfigError):
        reconstruction_score(EchoReference(), [(images(1, 0)[0], images(1, 0, size=4)[0])], cfg)
    with pytest.raises(ConfigError):
        MetricConfig(pairs_per_input=0)


def test_seeded_replay():
    xs, rs = images(5, 10), images(6, 11)
    cfg = MetricConfig(n_inputs=5, pairs_per_input=3, n_references=4, seed=9)
    m = EchoReference()
    assert diversity_score(m, xs, rs, cfg) == diversity_score(m, xs, rs, cfg)
    assert similarity_to_reference(CopyInput(), xs, rs, cfg) == similarity_to_reference(CopyInput(), xs, rs, cfg)


def test_metric_report_json(tmp_path):
    cfg = MetricConfig(seed=3)
    rep = metric_report("fid", 1.5, 10, cfg)
    write_report(tmp_path / "m.json", [rep])
    loaded = json.loads((tmp_path / "m.json").read_text())[0]
    assert set(loaded) == {"metric", "value", "n", "seed", "extractor"}
    assert loaded["extractor"]["kind"] == "toy-conv"
