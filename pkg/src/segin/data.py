"""Datasets, self-supervised training samples, and the synthetic shapes set."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

from .errors import DimensionError, ImageFormatError, InputError, ManifestError
from .features import FeatureExtractorConfig
from .matching import (AuxiliarySample, CorrespondenceMap, PatchSpec, WHITE, match_images,
                       reference_block)
from .segmentation import ForegroundPolicy, extract_foreground_mask

__all__ = [
    "DatasetManifest", "PostProcessConfig", "TrainingSample", "load_dataset", "load_image",
    "save_image", "extract_foreground_mask", "post_process", "inject_noise_sample",
    "construct_training_sample", "synth_shapes_dataset", "build_dataset", "sample_rng",
]


@dataclass
class DatasetManifest:
    root: str
    split: str = "train"
    pairs: list[tuple[str, str]] = field(default_factory=list)
    image_size: int = 64

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise InputError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.pairs)

    @property
    def path(self) -> str:
        return os.path.join(self.root, f"{self.split}.jsonl")

    def write(self, path: str | None = None) -> str:
        path = path or self.path
        with open(path, "w") as fh:
            for a, b in self.pairs:
                fh.write(json.dumps({"input": a, "target": b, "size": self.image_size}) + "\n")
        return path

    @classmethod
    def read(cls, root: str, split: str = "train", path: str | None = None,
             image_size: int | None = None) -> "DatasetManifest":
        path = path or os.path.join(root, f"{split}.jsonl")
        if not os.path.exists(path):
            raise ManifestError(f"manifest not found: {path}")
        pairs, size = [], image_size
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                pairs.append((rec["input"], rec["target"]))
                if size is None:
                    size = rec.get("size")
        return cls(root, split, pairs, size or 64)


@dataclass(frozen=True)
class PostProcessConfig:
    shift_prob: float = 0.1
    max_shift: int = 2
    repeat_prob: float = 0.1
    random_match_prob: float = 0.1
    noise_sample_prob: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("shift_prob", "repeat_prob", "random_match_prob", "noise_sample_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {p}")
        if self.max_shift < 0:
            raise InputError("max_shift must be >= 0")


NO_CORRUPTION = PostProcessConfig(0.0, 0, 0.0, 0.0, 0.0)


@dataclass
class TrainingSample:
    x: np.ndarray
    y: np.ndarray
    y_seg: np.ndarray
    aux: AuxiliarySample


def load_image(path: str, size: int | None = None) -> np.ndarray:
    """Read an image as float32 RGB in [0, 1], optionally resized to size x size."""
    if not os.path.exists(path):
        raise ManifestError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return arr


def save_image(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode).save(path)


def load_dataset(manifest: DatasetManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load every (x, y) pair of the manifest in order."""
    out = []
    for a, b in manifest.pairs:
        pa, pb = os.path.join(manifest.root, a), os.path.join(manifest.root, b)
        for p in (pa, pb):
            if not os.path.exists(p):
                raise ManifestError(f"missing image file: {p}")
        out.append((load_image(pa, manifest.image_size), load_image(pb, manifest.image_size)))
    return out


def _as_rng(rng, seed: int) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng(seed)
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_rng(seed: int, *indices: int) -> np.random.Generator:
    """Independent stream per (seed, index, ...); lets any sample be rebuilt in isolation."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, indices)]))


def post_process(aux: AuxiliarySample, corr: CorrespondenceMap, r_image: np.ndarray,
                 cfg: PostProcessConfig, rng=None) -> AuxiliarySample:
    """Simulate imperfect matches by shifting, repeating and randomizing foreground cells.

    Cells are visited in row-major order. Each draws three uniforms; the
    first that fires decides the corruption (shift beats repeat beats random).
    Shifts move the matched reference cell by up to ``max_shift`` cells in
    each axis, clamped to the reference grid. Repeats copy the previous
    foreground cell's (already processed) block.
    """
    rng = _as_rng(rng, cfg.seed)
    out = aux.copy()
    d = aux.delta
    cells = aux.cell_mask
    hf, wf = cells.shape
    rh, rw = corr.ref_grid if corr.ref_grid != (0, 0) else (hf, wf)
    prev = None
    for i in range(hf * wf):
        iy, ix = divmod(i, wf)
        if not cells[iy, ix]:
            continue
        u_shift, u_repeat, u_random = rng.random(3)
        src = None
        if u_shift < cfg.shift_prob:
            dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
            ry, rx = divmod(int(corr.xi[i]), rw)
            ry = min(max(ry + dy, 0), rh - 1)
            rx = min(max(rx + dx, 0), rw - 1)
            src = reference_block(r_image, ry * rw + rx, (rh, rw), d)
        elif u_repeat < cfg.repeat_prob:
            if prev is not None:
                py, px = prev
                src = out.aux[py * d:(py + 1) * d, px * d:(px + 1) * d].copy()
        elif u_random < cfg.random_match_prob:
            j = rng.integers(0, rh * rw)
            src = reference_block(r_image, j, (rh, rw), d)
        if src is not None:
            out.aux[iy * d:(iy + 1) * d, ix * d:(ix + 1) * d] = src
        prev = (iy, ix)
    return out


def inject_noise_sample(aux: AuxiliarySample, cfg: PostProcessConfig, rng=None) -> AuxiliarySample:
    """With probability ``noise_sample_prob``, shuffle the foreground blocks among themselves."""
    rng = _as_rng(rng, cfg.seed)
    if not rng.random() < cfg.noise_sample_prob:
        return aux
    d = aux.delta
    cells = np.flatnonzero(aux.cell_mask.reshape(-1))
    if cells.size < 2:
        return aux
    perm = rng.permutation(cells.size)
    out = aux.copy()
    wf = aux.cell_mask.shape[1]
    for dst, src in zip(cells, cells[perm]):
        (ty, tx), (sy, sx) = divmod(int(dst), wf), divmod(int(src), wf)
        out.aux[ty * d:(ty + 1) * d, tx * d:(tx + 1) * d] = aux.aux[sy * d:(sy + 1) * d, sx * d:(sx + 1) * d]
    return out


def target_segmentation(y: np.ndarray, policy: ForegroundPolicy = ForegroundPolicy()) -> np.ndarray:
    return extract_foreground_mask(y, policy.chroma_threshold, policy.white_threshold)


def construct_training_sample(x: np.ndarray, y: np.ndarray,
                              extractor: FeatureExtractorConfig = FeatureExtractorConfig(),
                              spec: PatchSpec = PatchSpec(),
                              post_cfg: PostProcessConfig = PostProcessConfig(), rng=None,
                              fg_policy: ForegroundPolicy = ForegroundPolicy(),
                              matched: tuple[AuxiliarySample, CorrespondenceMap] | None = None
                              ) -> TrainingSample:
    """Self-supervised sample: y serves as its own reference, then gets corrupted.

    ``matched`` may carry a cached ``match_images(x, y, ...)`` result; the
    match is deterministic so reusing it changes nothing.
    """
    if x.shape != y.shape:
        raise DimensionError(f"x and y shapes differ: {x.shape} vs {y.shape}")
    rng = _as_rng(rng, post_cfg.seed)
    aux, corr = matched if matched is not None else match_images(x, y, extractor, spec, fg_policy)
    aux = post_process(aux, corr, y, post_cfg, rng)
    aux = inject_noise_sample(aux, post_cfg, rng)
    return TrainingSample(x, y, target_segmentation(y, fg_policy), aux)


# synthetic data -----------------------------------------------------------

def _render_shape(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    kind = ("ellipse", "rectangle", "triangle")[int(rng.integers(3))]
    bw, bh = (rng.uniform(0.4, 0.85, size=2) * size).astype(int)
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    box = [x0, y0, x0 + bw - 1, y0 + bh - 1]
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if kind == "ellipse":
        draw.ellipse(box, fill=1)
    elif kind == "rectangle":
        draw.rectangle(box, fill=1)
    else:
        apex = x0 + int(rng.integers(0, bw))
        draw.polygon([(x0, box[3]), (box[2], box[3]), (apex, y0)], fill=1)
    mask = np.asarray(canvas, dtype=bool)
    # one saturated channel keeps the fill well clear of the white threshold
    color = rng.uniform(0.0, 1.0, size=3)
    color[int(rng.integers(3))] = rng.uniform(0.0, 0.6)
    return mask, color.astype(np.float32)


def render_pair(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (outline, filled shape) pair on a white background."""
    while True:
        mask, color = _render_shape(size, rng)
        frac = mask.mean()
        if 0.05 <= frac <= 0.9:
            break
    y = np.ones((size, size, 3), dtype=np.float32)
    y[mask] = color
    # second tone on the lower half of the shape gives references some spatial structure
    rows = np.arange(size)[:, None]
    ys = np.nonzero(mask.any(axis=1))[0]
    mid = (ys.min() + ys.max()) / 2.0
    lower = mask & (rows > mid)
    tone = np.clip(color * rng.uniform(0.4, 0.8), 0.0, 1.0)
    y[lower] = tone
    y = np.rint(y * 255.0) / 255.0
    edge = mask & ~ndimage.binary_erosion(mask)
    x = np.ones((size, size, 3), dtype=np.float32)
    x[edge] = 0.0
    return x, y.astype(np.float32)


def synth_shapes_dataset(n: int, size: int, seed: int, root: str, split: str = "train",
                         downsample_factor: int = 4) -> DatasetManifest:
    """Write ``n`` synthetic (outline, filled shape) pairs under ``root`` and return their manifest."""
    if size % downsample_factor:
        raise DimensionError(f"size {size} not divisible by downsample factor {downsample_factor}")
    sub_a, sub_b = f"{split}A", f"{split}B"
    try:
        os.makedirs(os.path.join(root, sub_a), exist_ok=True)
        os.makedirs(os.path.join(root, sub_b), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        x, y = render_pair(size, rng)
        name = f"{i:04d}.png"
        save_image(os.path.join(root, sub_a, name), x)
        save_image(os.path.join(root, sub_b, name), y)
        pairs.append((f"{sub_a}/{name}", f"{sub_b}/{name}"))
    manifest = DatasetManifest(root, split, pairs, size)
    manifest.write()
    return manifest


def build_dataset(root: str, split: str = "train", image_size: int = 64,
                  policy: ForegroundPolicy = ForegroundPolicy()) -> DatasetManifest:
    """Index an existing ``root/{split}A, {split}B`` layout and cache target segmentations."""
    dir_a, dir_b = os.path.join(root, f"{split}A"), os.path.join(root, f"{split}B")
    if not os.path.isdir(dir_a) or not os.path.isdir(dir_b):
        raise ManifestError(f"expected directories {dir_a} and {dir_b}")
    names = sorted(f for f in os.listdir(dir_a) if f.lower().endswith(".png"))
    pairs = []
    seg_dir = os.path.join(root, "seg") if split == "train" else os.path.join(root, "seg", split)
    os.makedirs(seg_dir, exist_ok=True)
    for name in names:
        if not os.path.exists(os.path.join(dir_b, name)):
            raise ManifestError(f"no matching target for {os.path.join(dir_a, name)}")
        pairs.append((f"{split}A/{name}", f"{split}B/{name}"))
        y = load_image(os.path.join(dir_b, name), image_size)
        seg = target_segmentation(y, policy)
        Image.fromarray(seg * 255).save(os.path.join(seg_dir, name))
    manifest = DatasetManifest(root, split, pairs, image_size)
    manifest.write()
    return manifest
