"""Command-line entry point: ``segin <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .data import DatasetManifest, build_dataset, load_dataset, load_image, save_image, synth_shapes_dataset
from .errors import SeginError
from .evaluation import (MetricConfig, diversity_score, metric_report, reconstruction_score,
                         similarity_to_reference, translated_fid, write_report)
from .features import FeatureExtractorConfig
from .matching import PatchSpec, match_images
from .tensorio import write_segt
from .trainer import ABLATIONS, TrainConfig, Trainer, ablation_config, train

log = logging.getLogger("segin")


def _data_root(args) -> str:
    root = args.data or os.environ.get("SEGIN_DATA_ROOT")
    if not root:
        raise SeginError("no dataset root: pass --data or set SEGIN_DATA_ROOT")
    return root


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.read(args.config) if getattr(args, "config", None) else TrainConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "size", None) is not None:
        over["image_size"] = args.size
    return dataclasses.replace(cfg, **over)


def _print_config(name: str, cfg: dict) -> None:
    print(json.dumps({"command": name, "config": cfg}, indent=1, sort_keys=True, default=str))


def _metric_config(args, extractor: FeatureExtractorConfig) -> MetricConfig:
    return MetricConfig(extractor=extractor, n_inputs=args.n_inputs, pairs_per_input=args.pairs,
                        n_references=args.n_references, seed=args.seed if args.seed is not None else 0)


def _evaluate(trainer_or_path, root: str, args, out: str) -> list[dict]:
    trainer = trainer_or_path if isinstance(trainer_or_path, Trainer) else Trainer.load(trainer_or_path)
    size = args.size or trainer.cfg.image_size
    manifest = DatasetManifest.read(root, "test", image_size=size)
    pairs = load_dataset(manifest)
    if not pairs:
        raise SeginError("empty test set")
    mcfg = _metric_config(args, trainer.cfg.extractor)
    _print_config("evaluate", {"metric": dataclasses.asdict(mcfg), "data": root, "n_test": len(pairs)})
    model = trainer.model
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
    n = min(mcfg.n_inputs, len(pairs))
    reports = [metric_report("fid_proxy", translated_fid(model, pairs, mcfg), n, mcfg),
               metric_report("lpips_gt_proxy", reconstruction_score(model, pairs, mcfg), n, mcfg),
               metric_report("lpips_ref_proxy", similarity_to_reference(model, xs, ys, mcfg), n, mcfg)]
    if len(ys) >= 2:
        reports.append(metric_report("diversity_proxy", diversity_score(model, xs, ys, mcfg), n, mcfg))
    os.makedirs(out, exist_ok=True)
    write_report(os.path.join(out, "metrics.json"), reports)
    for r in reports:
        print(f"{r['metric']}: {r['value']:.6f}")
    return reports


def cmd_match(args) -> None:
    cfg = _train_config(args)
    size = args.size or cfg.image_size
    x, r = load_image(args.input, size), load_image(args.ref, size)
    _print_config("match", {k: v for k, v in cfg.to_flat().items()
                            if k.split(".")[0] in ("extractor", "patch", "foreground")})
    aux, corr = match_images(x, r, cfg.extractor, cfg.patch, cfg.foreground)
    os.makedirs(args.out, exist_ok=True)
    save_image(os.path.join(args.out, "aux.png"), aux.aux)
    save_image(os.path.join(args.out, "mask.png"), aux.valid_mask.astype(np.float32))
    hf, wf = corr.input_grid
    dump = np.stack([corr.xi.astype(np.float32), corr.score.astype(np.float32)], axis=-1).reshape(hf, wf, 2)
    write_segt(os.path.join(args.out, "corr.segt"), dump, x.shape[:2])


def cmd_synth(args) -> None:
    seed = args.seed if args.seed is not None else 1
    size = args.size or 64
    _print_config("synth-data", {"out": args.out, "n": args.n, "n_test": args.n_test, "size": size, "seed": seed})
    synth_shapes_dataset(args.n, size, seed, args.out, "train")
    synth_shapes_dataset(args.n_test, size, seed + 1, args.out, "test")


def cmd_build(args) -> None:
    root = _data_root(args)
    size = args.size or 64
    _print_config("build-dataset", {"data": root, "split": args.split, "size": size})
    m = build_dataset(root, args.split, size)
    print(f"{len(m)} pairs -> {m.path}")


def cmd_train(args) -> None:
    root = _data_root(args)
    cfg = ablation_config(_train_config(args), getattr(args, "disable", None))
    _print_config("train", cfg.to_flat())
    manifest = DatasetManifest.read(root, "train", image_size=cfg.image_size)
    return train(cfg, manifest, args.out, resume=getattr(args, "resume", None))


def cmd_translate(args) -> None:
    trainer = Trainer.load(args.checkpoint)
    size = args.size or trainer.cfg.image_size
    _print_config("translate", {"checkpoint": args.checkpoint, "input": args.input, "ref": args.ref, "size": size})
    x, r = load_image(args.input, size), load_image(args.ref, size)
    y_hat, seg_hat, aux = trainer.model.translate(x, r)
    os.makedirs(args.out, exist_ok=True)
    save_image(os.path.join(args.out, "y_hat.png"), y_hat)
    if seg_hat is not None:
        save_image(os.path.join(args.out, "seg_hat.png"), seg_hat[..., 0])
    save_image(os.path.join(args.out, "grid.png"), np.concatenate([x, r, aux.aux, y_hat], axis=1))


def cmd_evaluate(args) -> None:
    _evaluate(args.checkpoint, _data_root(args), args, args.out)


def cmd_ablate(args) -> None:
    trainer = cmd_train(args)
    _evaluate(trainer, _data_root(args), args, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segin", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--size", type=int, help="image side length in pixels")
        return sp

    def metrics(sp):
        sp.add_argument("--n-inputs", type=int, default=100)
        sp.add_argument("--pairs", type=int, default=19)
        sp.add_argument("--n-references", type=int, default=10)

    sp = common(sub.add_parser("match", help="semantic match of one input/reference pair"))
    sp.add_argument("--input", required=True)
    sp.add_argument("--ref", required=True)
    sp.set_defaults(func=cmd_match)

    sp = common(sub.add_parser("synth-data", help="write the synthetic shapes dataset"))
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--n-test", type=int, default=60)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("build-dataset", help="index trainA/trainB folders"), out_required=False)
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "test"), default="train")
    sp.set_defaults(func=cmd_build)

    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("translate", help="translate an input guided by a reference"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--ref", required=True)
    sp.set_defaults(func=cmd_translate)

    sp = common(sub.add_parser("evaluate", help="proxy FID / LPIPS protocols on the test split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    metrics(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("ablate", help="train and evaluate with one component disabled"))
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--disable", choices=ABLATIONS, required=True)
    metrics(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        args.func(args)
    except (SeginError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
