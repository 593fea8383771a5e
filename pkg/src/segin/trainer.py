"""Alternating discriminator/generator optimization, checkpoints and inference."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import (DatasetManifest, PostProcessConfig, TrainingSample, construct_training_sample,
                   load_dataset, sample_rng)
from .errors import ConfigError, InputError
from .features import FeatureExtractorConfig
from .losses import (LossReport, LossWeights, feature_loss, gan_loss_d, gan_loss_g, recon_loss,
                     seg_att_loss, seg_loss, total_loss, tv_loss)
from .matching import AuxiliarySample, PatchSpec, match_images, semantic_match
from .networks import Discriminator, Generator, GeneratorConfig, init_weights
from .segmentation import ForegroundPolicy
from .tensorio import load_archive, save_archive

log = logging.getLogger(__name__)

# 64x64 images through 3 stride-2 blocks leave an 8x8 bottleneck for the non-local layers
DESK_GENERATOR = GeneratorConfig(encoder_blocks=3)


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 1.3e-5
    batch_size: int = 4
    epochs: int = 1
    steps: int | None = None
    beta1: float = 0.5
    beta2: float = 0.999
    flip_period: int = 3
    seed: int = 0
    checkpoint_every: int = 0
    image_size: int = 64
    disc_channels: int = 16
    weights: LossWeights = LossWeights()
    generator: GeneratorConfig = DESK_GENERATOR
    extractor: FeatureExtractorConfig = FeatureExtractorConfig()
    patch: PatchSpec = PatchSpec()
    post: PostProcessConfig = PostProcessConfig()
    foreground: ForegroundPolicy = ForegroundPolicy()

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise InputError("learning rates must be positive")
        if self.flip_period < 1:
            raise InputError("flip_period must be >= 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")

    # flat key=value form: nested fields are written as section.key
    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = _fmt(sub)
            else:
                out[f.name] = _fmt(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        top, nested = {}, {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in flat.items():
            head, _, tail = key.partition(".")
            if head not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if tail:
                nested.setdefault(head, {})[tail] = raw
            else:
                top[head] = _parse(raw, getattr(base, head))
        kwargs = dict(top)
        for head, sub in nested.items():
            current = getattr(base, head)
            sub_fields = {f.name for f in dataclasses.fields(current)}
            parsed = {}
            for k, raw in sub.items():
                if k not in sub_fields:
                    raise ConfigError(f"unknown config key {head}.{k!r}")
                parsed[k] = _parse(raw, getattr(current, k))
            kwargs[head] = dataclasses.replace(current, **parsed)
        return dataclasses.replace(base, **kwargs)

    def to_dict(self) -> dict:
        return self.to_flat()

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            for k, v in self.to_flat().items():
                fh.write(f"{k} = {v}\n")

    @classmethod
    def read(cls, path: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_flat(read_flat_config(path), base)


def _fmt(v) -> str:
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, like):
    raw = str(raw).strip()
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        if isinstance(like, int) or (like is None and raw.lstrip("-").isdigit()):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}") from exc
    return raw


def read_flat_config(path: str) -> dict[str, str]:
    """key=value lines; section headers are optional and ignored."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        text = fh.read()
    parser.read_string("[__top__]\n" + text)
    flat = {}
    for section in parser.sections():
        flat.update(parser[section])
    return flat


def label_schedule(step: int, flip_period: int = 3) -> bool:
    """True on the last discriminator step of every period (real:0, fake:1)."""
    if step < 0:
        raise InputError("step must be >= 0")
    return step % flip_period == flip_period - 1


def _stack(arrs, channels_last=True) -> torch.Tensor:
    a = np.stack([np.asarray(x, dtype=np.float32) for x in arrs])
    t = torch.from_numpy(a)
    if t.dim() == 3:
        return t[:, None]
    return t.permute(0, 3, 1, 2).contiguous()


def normalize_config(cfg: TrainConfig) -> TrainConfig:
    """Without the segmentation decoder the two mask terms have nothing to act on."""
    if not cfg.generator.multitask and (cfg.weights.seg or cfg.weights.seg_att):
        return dataclasses.replace(cfg, weights=cfg.weights.replace(seg=0.0, seg_att=0.0))
    return cfg


class TranslationModel:
    """Inference bundle: a generator plus the matching settings it was trained with."""

    def __init__(self, generator: Generator, extractor: FeatureExtractorConfig = FeatureExtractorConfig(),
                 patch: PatchSpec = PatchSpec(), foreground: ForegroundPolicy = ForegroundPolicy()):
        self.generator = generator
        self.extractor = extractor
        self.patch = patch
        self.foreground = foreground

    def match(self, x, r) -> AuxiliarySample:
        return semantic_match(x, r, self.extractor, self.patch, self.foreground)

    def translate_batch(self, xs: Sequence[np.ndarray], rs: Sequence[np.ndarray], batch: int = 32):
        """Translate pairs (x_i, r_i); returns lists of y_hat, seg_hat, aux."""
        auxes = [self.match(x, r) for x, r in zip(xs, rs)]
        ys, segs = [], []
        gen = self.generator
        was = gen.training
        gen.eval()
        try:
            with torch.no_grad():
                for s in range(0, len(auxes), batch):
                    a = auxes[s:s + batch]
                    y_hat, seg_hat = gen(_stack(xs[s:s + batch]), _stack([q.aux for q in a]),
                                         _stack([q.valid_mask for q in a]))
                    ys.extend(y_hat.permute(0, 2, 3, 1).numpy())
                    if seg_hat is None:
                        segs.extend([None] * len(a))
                    else:
                        segs.extend(seg_hat.permute(0, 2, 3, 1).numpy())
        finally:
            gen.train(was)
        return ys, segs, auxes

    def translate(self, x, r):
        ys, segs, auxes = self.translate_batch([x], [r])
        return ys[0], segs[0], auxes[0]


class Trainer:
    """Owns the generator, discriminator, optimizers and step counter."""

    def __init__(self, cfg: TrainConfig, data: Sequence[tuple[np.ndarray, np.ndarray]] = ()):
        self.cfg = cfg
        self.data = list(data)
        self.cfg = cfg = normalize_config(cfg)
        gcfg = cfg.generator
        torch.manual_seed(cfg.seed)
        self.generator = Generator(gcfg)
        init_weights(self.generator, cfg.seed)
        self.discriminator = Discriminator(cfg.disc_channels)
        init_weights(self.discriminator, cfg.seed + 1)
        self.generator.train()
        self.discriminator.train()
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr_d, betas=betas)
        self.step = 0
        self._matched: dict[int, tuple] = {}

    # data ---------------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return max(len(self.data) // self.cfg.batch_size, 1)

    @property
    def total_steps(self) -> int:
        if self.cfg.steps is not None:
            return self.cfg.steps
        return self.cfg.epochs * self.steps_per_epoch if self.data else 0

    def batch_indices(self, step: int) -> list[int]:
        spe, bs = self.steps_per_epoch, self.cfg.batch_size
        epoch, offset = divmod(step, spe)
        order = sample_rng(self.cfg.seed, 1, epoch).permutation(len(self.data))
        return [int(order[(offset * bs + b) % len(order)]) for b in range(bs)]

    def sample(self, index: int, step: int, slot: int) -> TrainingSample:
        cfg = self.cfg
        x, y = self.data[index]
        if index not in self._matched:
            self._matched[index] = match_images(x, y, cfg.extractor, cfg.patch, cfg.foreground)
        return construct_training_sample(x, y, cfg.extractor, cfg.patch, cfg.post,
                                         sample_rng(cfg.seed, 2, step, slot), cfg.foreground,
                                         matched=self._matched[index])

    def batch(self, step: int) -> list[TrainingSample]:
        return [self.sample(i, step, b) for b, i in enumerate(self.batch_indices(step))]

    # optimization -------------------------------------------------------
    def train_step(self, samples: Sequence[TrainingSample]) -> LossReport:
        if not samples:
            raise InputError("train_step needs a non-empty batch")
        cfg, w = self.cfg, self.cfg.weights
        x = _stack([s.x for s in samples])
        y = _stack([s.y for s in samples])
        aux = _stack([s.aux.aux for s in samples])
        mask = _stack([s.aux.valid_mask for s in samples])
        y_seg = _stack([s.y_seg for s in samples])
        G, D = self.generator, self.discriminator

        y_hat, seg_hat = G(x, aux, mask)

        # discriminator: one forward over real and fake, one power iteration
        flipped = label_schedule(self.step, cfg.flip_period)
        self.opt_d.zero_grad(set_to_none=True)
        probs = D(torch.cat([x, x]), torch.cat([y, y_hat.detach()]))
        d_real, d_fake = probs.chunk(2)
        loss_d = gan_loss_d(d_real, d_fake, flipped)
        _finite("gan_d", loss_d)
        loss_d.backward()
        self.opt_d.step()

        # generator: the discriminator's power-iteration state stays frozen here
        self.opt_g.zero_grad(set_to_none=True)
        terms = {
            "recon": recon_loss(y_hat, y),
            "feature": feature_loss(y_hat, y, cfg.extractor),
            "gan_g": gan_loss_g(D(x, y_hat, update_state=False)),
            "tv": tv_loss(y_hat),
        }
        if seg_hat is not None:
            terms["seg"] = seg_loss(seg_hat, y_seg)
            terms["seg_att"] = seg_att_loss(seg_hat, y_hat, y_seg, y)
        else:
            zero = y_hat.sum() * 0.0
            terms["seg"] = zero
            terms["seg_att"] = zero
        for name, v in terms.items():
            _finite(name, v)
        total = total_loss(terms, w)
        _finite("total", total)
        total.backward()
        self.opt_g.step()
        # gradients from the generator pass must not leak into the next D update
        self.opt_d.zero_grad(set_to_none=True)

        self.step += 1
        return LossReport(**{k: float(v.detach()) for k, v in terms.items()},
                          gan_d=float(loss_d.detach()), total=float(total.detach()))

    def run(self, until: int | None = None, csv_path: str | None = None, out_dir: str | None = None,
            callback=None) -> list[LossReport]:
        until = self.total_steps if until is None else until
        if until > self.step and not self.data:
            raise ConfigError("no training data")
        reports = []
        writer_fh = open(csv_path, "a", newline="") if csv_path else None
        try:
            writer = csv.writer(writer_fh) if writer_fh else None
            while self.step < until:
                step = self.step
                report = self.train_step(self.batch(step))
                reports.append(report)
                if writer:
                    writer.writerow(report.csv_row(step))
                    writer_fh.flush()
                if callback:
                    callback(step, report)
                every = self.cfg.checkpoint_every
                if out_dir and every and self.step % every == 0:
                    self.save(os.path.join(out_dir, f"ckpt_{self.step:06d}.zip"))
        finally:
            if writer_fh:
                writer_fh.close()
        return reports

    # inference / persistence -------------------------------------------
    @property
    def model(self) -> TranslationModel:
        return TranslationModel(self.generator, self.cfg.extractor, self.cfg.patch, self.cfg.foreground)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mod in (("generator", self.generator), ("discriminator", self.discriminator)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}/{k}"] = v
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    out[f"{prefix}/{idx}/{k}"] = v if torch.is_tensor(v) else torch.tensor(float(v))
        return out

    def save(self, path: str) -> str:
        meta = {"step": self.step, "train_config": self.cfg.to_flat()}
        save_archive(path, self.state_tensors(), meta)
        return path

    @classmethod
    def load(cls, path: str, data: Sequence = ()) -> "Trainer":
        tensors, meta = load_archive(path)
        trainer = cls(TrainConfig.from_flat(meta["train_config"]), data)
        trainer.load_tensors(tensors)
        trainer.step = int(meta["step"])
        return trainer

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for prefix, mod in (("generator", self.generator), ("discriminator", self.discriminator)):
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
            mod.load_state_dict(sd, strict=True)
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            sd = opt.state_dict()
            state = {}
            for k, v in tensors.items():
                if k.startswith(prefix + "/"):
                    _, idx, name = k.split("/", 2)
                    state.setdefault(int(idx), {})[name] = v.clone()
            sd["state"] = state
            opt.load_state_dict(sd)


def _finite(name: str, v: torch.Tensor):
    val = float(v.detach())
    if not math.isfinite(val):
        raise FloatingPointError(f"non-finite loss term {name!r}: {val}")


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str, resume: str | None = None,
          callback=None) -> Trainer:
    """Train to the configured step count, writing losses.csv and final.zip under ``out_dir``.

    ``resume`` continues from a checkpoint written by an earlier run with the
    same configuration; the loss CSV is truncated to the checkpoint's step.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    data = load_dataset(manifest)
    csv_path = os.path.join(out_dir, "losses.csv")
    if resume:
        trainer = Trainer.load(resume, data)
        _check_resumable(trainer.cfg, config)
        trainer.cfg = dataclasses.replace(trainer.cfg, steps=config.steps, epochs=config.epochs,
                                          checkpoint_every=config.checkpoint_every)
        _truncate_csv(csv_path, trainer.step)
    else:
        trainer = Trainer(config, data)
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(("step",) + LossReport.CSV_FIELDS)
    config.write(os.path.join(out_dir, "config.ini"))
    trainer.run(csv_path=csv_path, out_dir=out_dir, callback=callback)
    trainer.save(os.path.join(out_dir, "final.zip"))
    return trainer


SCHEDULE_KEYS = ("steps", "epochs", "checkpoint_every")


def _check_resumable(saved: TrainConfig, new: TrainConfig) -> None:
    a, b = saved.to_flat(), normalize_config(new).to_flat()
    diff = [k for k in a if k not in SCHEDULE_KEYS and a[k] != b.get(k)]
    if diff:
        raise ConfigError(f"cannot resume: configuration differs in {', '.join(diff)}")


def _truncate_csv(path: str, step: int) -> None:
    rows = []
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    header = ("step",) + LossReport.CSV_FIELDS
    body = [r for r in rows[1:] if r and int(r[0]) < step]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(body)


def read_loss_csv(path: str) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_model(checkpoint) -> TranslationModel:
    """Accept a Trainer, anything with ``translate_batch``, or a checkpoint path."""
    if hasattr(checkpoint, "translate_batch"):
        return checkpoint
    if isinstance(checkpoint, Trainer):
        return checkpoint.model
    return Trainer.load(checkpoint).model


def translate(x: np.ndarray, r: np.ndarray, checkpoint):
    """Match x against r (no corruption) and run the generator: (y_hat, seg_hat, aux)."""
    return load_model(checkpoint).translate(x, r)


ABLATIONS = ("gan", "recon", "feature", "tv", "nonlocal", "multitask")


def ablation_config(cfg: TrainConfig, disable: str | None) -> TrainConfig:
    """Config with one loss term zeroed or one component removed."""
    if not disable:
        return cfg
    if disable not in ABLATIONS:
        raise ConfigError(f"unknown ablation {disable!r}; choose from {ABLATIONS}")
    if disable == "nonlocal":
        g = cfg.generator
        return dataclasses.replace(cfg, generator=dataclasses.replace(g, nonlocal_count=0, residual_blocks=g.n_residual))
    if disable == "multitask":
        g = dataclasses.replace(cfg.generator, multitask=False)
        return dataclasses.replace(cfg, generator=g, weights=cfg.weights.replace(seg=0.0, seg_att=0.0))
    return dataclasses.replace(cfg, weights=cfg.weights.replace(**{disable: 0.0}))
