"""Patch correspondence between an input and a reference, and the auxiliary mosaic built from it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConsistencyError, DimensionError, InputError
from .features import FeatureExtractorConfig, FeatureMap, extract_features
from .segmentation import ForegroundPolicy, downsample_mask, policy_mask

WHITE = 1.0


@dataclass(frozen=True)
class PatchSpec:
    k: int = 3
    stride: int = 1
    padding: str = "reflect"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise InputError(f"patch size k must be odd and >= 1, got {self.k}")
        if self.stride < 1:
            raise InputError(f"stride must be >= 1, got {self.stride}")
        if self.padding != "reflect":
            raise InputError(f"unsupported padding {self.padding!r}")


@dataclass
class CorrespondenceMap:
    """Best reference patch index ``xi`` and its cosine ``score`` for every input patch.

    ``input_grid`` and ``ref_grid`` are the feature-grid shapes the indices
    refer to (row-major).
    """

    xi: np.ndarray
    score: np.ndarray
    n_r: int
    input_grid: tuple[int, int] = (0, 0)
    ref_grid: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if self.xi.shape != self.score.shape:
            raise ConsistencyError("xi and score lengths differ")
        if self.xi.size and (self.xi.min() < 0 or self.xi.max() >= self.n_r):
            raise ConsistencyError(f"xi index out of range [0, {self.n_r})")

    @property
    def n_x(self) -> int:
        return self.xi.size


@dataclass
class AuxiliarySample:
    """Auxiliary image (H, W, 3) with its binary valid-pixel mask (H, W)."""

    aux: np.ndarray
    valid_mask: np.ndarray
    delta: int = 1
    cell_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.cell_mask is None:
            d = self.delta
            self.cell_mask = self.valid_mask[::d, ::d].copy()

    def copy(self) -> "AuxiliarySample":
        return AuxiliarySample(self.aux.copy(), self.valid_mask.copy(), self.delta, self.cell_mask.copy())


def vectorize_patches(fm: FeatureMap, spec: PatchSpec) -> np.ndarray:
    """Row i is the row-major (dy, dx, c) flattening of the k x k x C patch at position i."""
    data = fm.data
    hf, wf, c = data.shape
    k = spec.k
    if k > 2 * min(hf, wf) - 1:
        raise DimensionError(f"patch size {k} too large for a {hf}x{wf} feature grid")
    r = k // 2
    padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="reflect") if r else data
    # windows: (hf, wf, C, k, k) -> (hf, wf, k, k, C)
    win = sliding_window_view(padded, (k, k), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
    win = win[::spec.stride, ::spec.stride]
    return np.ascontiguousarray(win.reshape(-1, k * k * c))


def cosine_matrix(px: np.ndarray, pr: np.ndarray) -> np.ndarray:
    """Cosine similarity of every input row against every reference row.

    One-sided zero norms give -inf; zero against zero gives 1.
    """
    px = np.asarray(px, dtype=np.float64)
    pr = np.asarray(pr, dtype=np.float64)
    nx = np.linalg.norm(px, axis=1)
    nr = np.linalg.norm(pr, axis=1)
    zx, zr = nx == 0, nr == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (px @ pr.T) / np.outer(np.where(zx, 1.0, nx), np.where(zr, 1.0, nr))
    np.clip(cos, -1.0, 1.0, out=cos)
    cos[zx[:, None] ^ zr[None, :]] = -np.inf
    cos[zx[:, None] & zr[None, :]] = 1.0
    return cos


def compute_correspondence(fx: FeatureMap, fr: FeatureMap, spec: PatchSpec = PatchSpec(),
                           candidates: np.ndarray | None = None) -> CorrespondenceMap:
    """Argmax-cosine reference patch for every input patch; ties go to the lowest index.

    ``candidates`` optionally restricts the search to a boolean subset of
    reference positions; indices in the result still address the full list.
    """
    if fx.channels != fr.channels:
        raise DimensionError(f"channel mismatch: {fx.channels} vs {fr.channels}")
    px = vectorize_patches(fx, spec)
    pr = vectorize_patches(fr, spec)
    cos = cosine_matrix(px, pr)
    if candidates is not None:
        candidates = np.asarray(candidates, dtype=bool).reshape(-1)
        if candidates.size != pr.shape[0]:
            raise DimensionError("candidate mask does not match the reference patch count")
        if candidates.any():
            cos[:, ~candidates] = -np.inf
    xi = np.argmax(cos, axis=1)
    score = cos[np.arange(cos.shape[0]), xi]
    # all candidates -inf: index 0 wins and the score is reported at the floor
    score = np.where(np.isfinite(score), score, -1.0)
    s = spec.stride
    grid_x = (-(-fx.grid[0] // s), -(-fx.grid[1] // s))
    grid_r = (-(-fr.grid[0] // s), -(-fr.grid[1] // s))
    return CorrespondenceMap(xi, score, pr.shape[0], grid_x, grid_r)


def reference_block(r_image: np.ndarray, j: int, ref_grid: tuple[int, int], delta: int) -> np.ndarray:
    ry, rx = divmod(int(j), ref_grid[1])
    return r_image[ry * delta:(ry + 1) * delta, rx * delta:(rx + 1) * delta]


def build_auxiliary(input_shape: tuple[int, int], r_image: np.ndarray, corr: CorrespondenceMap,
                    delta: int, fg_mask: np.ndarray | None = None) -> AuxiliarySample:
    """Tile an (H, W, 3) mosaic from the matched reference cells.

    Foreground input cell i receives the delta x delta block of the reference
    cell ``corr.xi[i]``; background cells stay white with mask 0.
    """
    if isinstance(delta, float) and not delta.is_integer():
        raise DimensionError(f"delta must be an integer, got {delta}")
    if int(delta) != delta or delta < 1:
        raise DimensionError(f"delta must be a positive integer, got {delta}")
    delta = int(delta)
    h, w = input_shape
    if h % delta or w % delta:
        raise DimensionError(f"input shape {(h, w)} is not divisible by delta {delta}")
    hf, wf = h // delta, w // delta
    if corr.n_x != hf * wf:
        raise DimensionError(f"correspondence covers {corr.n_x} cells, input grid has {hf * wf}")
    r_image = np.asarray(r_image)
    rh, rw = corr.ref_grid if corr.ref_grid != (0, 0) else (hf, wf)
    if r_image.shape[0] != rh * delta or r_image.shape[1] != rw * delta:
        raise DimensionError(f"reference image {r_image.shape[:2]} incompatible with grid {(rh, rw)} at delta {delta}")
    if corr.xi.size and (corr.xi.min() < 0 or corr.xi.max() >= rh * rw):
        raise ConsistencyError("correspondence index outside the reference grid")
    if fg_mask is None:
        cells = np.ones((hf, wf), dtype=np.uint8)
    else:
        cells = np.asarray(fg_mask, dtype=np.uint8).reshape(hf, wf)
    # gather reference blocks: (rh, rw, d, d, 3) indexed by xi
    blocks = r_image.reshape(rh, delta, rw, delta, 3).transpose(0, 2, 1, 3, 4).reshape(rh * rw, delta, delta, 3)
    tiles = blocks[corr.xi].reshape(hf, wf, delta, delta, 3).astype(np.float32)
    tiles[cells == 0] = WHITE
    aux = tiles.transpose(0, 2, 1, 3, 4).reshape(h, w, 3)
    valid = np.kron(cells, np.ones((delta, delta), dtype=np.uint8))
    return AuxiliarySample(aux, valid, delta, cells.copy())


def match_images(x: np.ndarray, r: np.ndarray, cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                 spec: PatchSpec = PatchSpec(), fg_policy: ForegroundPolicy = ForegroundPolicy()
                 ) -> tuple[AuxiliarySample, CorrespondenceMap]:
    """Semantic match returning both the auxiliary sample and the correspondence behind it."""
    if spec.stride != 1:
        raise DimensionError("auxiliary reconstruction needs stride 1 (one patch per feature cell)")
    fx = extract_features(x, cfg)
    fr = extract_features(r, cfg)
    delta = fx.delta
    if fr.delta != delta:
        raise DimensionError("input and reference features have different scaling")
    fg = downsample_mask(policy_mask(x, fg_policy), delta)
    candidates = None
    if fg_policy.enabled and fg_policy.restrict_reference:
        candidates = downsample_mask(policy_mask(r, fg_policy), delta)
    corr = compute_correspondence(fx, fr, spec, candidates)
    aux = build_auxiliary(x.shape[:2], r, corr, delta, fg)
    return aux, corr


def semantic_match(x: np.ndarray, r: np.ndarray, cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                   spec: PatchSpec = PatchSpec(), fg_policy: ForegroundPolicy = ForegroundPolicy()
                   ) -> AuxiliarySample:
    return match_images(x, r, cfg, spec, fg_policy)[0]
