"""Command-line front end.

    rcdet generate --config exp.yaml          build the dataset directory
    rcdet train    --config exp.yaml          train every configured seed
    rcdet eval     --config exp.yaml          score a checkpoint on a split
    rcdet analyze  --config exp.yaml          saliency + gradient reports
    rcdet derive-strengths --factors 1,1,1    factor/strength conversion

Commands are deterministic: the config seeds drive all randomness, and
re-running a command rewrites byte-identical tables.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as config_mod
from . import report, tensor_io
from .analysis import grad_decomposition_check, interference_metrics, saliency_maps
from .config import ConfigError, ExperimentConfig
from .connections import factors_from_strengths, strengths_from_factors
from .detector import ToyDetector
from .scenes import PlacementError, load_dataset, make_dataset, save_dataset
from .train import (TrainingDivergence, TrainSettings, evaluate,
                    load_checkpoint, save_checkpoint, train)


def build_detector(cfg: ExperimentConfig, seed: int) -> ToyDetector:
    d = cfg.detector
    return ToyDetector(num_classes=cfg.scene.num_classes, num_levels=d.num_levels,
                       connection=cfg.connection, pafpn=d.pafpn, seed=seed,
                       stem_channels=d.stem_channels,
                       stage_channels=d.stage_channels,
                       pyramid_channels=d.pyramid_channels,
                       head_channels=d.head_channels)


def _outputs(cfg: ExperimentConfig, args) -> str:
    out = args.out if args.out else cfg.outputs
    os.makedirs(out, exist_ok=True)
    return out


def _dataset_dir(out: str) -> str:
    return os.path.join(out, "dataset")


def _make_splits(cfg: ExperimentConfig):
    train_scenes = make_dataset(cfg.scene, cfg.train_count, salt=0)
    test_scenes = make_dataset(cfg.scene, cfg.test_count, salt=1)
    return train_scenes, test_scenes


def _load_or_build_splits(cfg: ExperimentConfig, out: str):
    ds = _dataset_dir(out)
    if not os.path.exists(os.path.join(ds, "meta.txt")):
        train_scenes, test_scenes = _make_splits(cfg)
        save_dataset(ds, train_scenes, test_scenes, cfg.scene)
        return train_scenes, test_scenes
    meta, train_scenes, test_scenes = load_dataset(ds)
    for key, want in (("seed", cfg.scene.seed), ("train_count", cfg.train_count),
                      ("test_count", cfg.test_count)):
        if meta.get(key) != want:
            raise ConfigError(f"dataset at {ds} has {key}={meta.get(key)} but the "
                              f"config says {want}; delete it or change outputs")
    return train_scenes, test_scenes


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _run_dir(out: str, seed: int) -> str:
    return os.path.join(out, f"run_seed{seed}")


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = _outputs(cfg, args)
    train_scenes, test_scenes = _make_splits(cfg)
    save_dataset(_dataset_dir(out), train_scenes, test_scenes, cfg.scene)
    n_obj = sum(len(a) for _, a in train_scenes) + sum(len(a) for _, a in test_scenes)
    print(f"dataset: {len(train_scenes)} train / {len(test_scenes)} test images, "
          f"{n_obj} objects -> {_dataset_dir(out)}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _outputs(cfg, args)
    train_scenes, test_scenes = _load_or_build_splits(cfg, out)
    settings = TrainSettings(epochs=cfg.epochs, base_lr=cfg.lr)
    for seed in _seeds(cfg, args):
        det = build_detector(cfg, seed)
        result = train(det, train_scenes, test_scenes, settings, seed=seed,
                       image_size=cfg.scene.image_size)
        run = _run_dir(out, seed)
        os.makedirs(run, exist_ok=True)
        save_checkpoint(os.path.join(run, "checkpoint"), det, epoch=cfg.epochs,
                        config_hash=cfg.config_hash(), factor_set=result.factor_set)
        report.write_trajectory(run, result.trajectory)
        if result.trajectory:
            last = result.trajectory[-1]
            print(f"seed {seed}: epoch {last.epoch} loss {last.loss_total:.4f} "
                  f"ap50 {last.ap50} -> {run}")
        else:
            print(f"seed {seed}: initialized checkpoint (0 epochs) -> {run}")
    return 0


def _checkpoint_dir(cfg: ExperimentConfig, args, out: str) -> str:
    if args.checkpoint:
        return args.checkpoint
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return os.path.join(_run_dir(out, seed), "checkpoint")


def _eval_split(cfg: ExperimentConfig, args, out: str):
    if args.dataset:
        from .scenes import load_split
        return load_split(args.dataset)
    _, test_scenes = _load_or_build_splits(cfg, out)
    return test_scenes


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _outputs(cfg, args)
    det, _, fs = load_checkpoint(_checkpoint_dir(cfg, args, out))
    scenes = _eval_split(cfg, args, out)
    ap, energies = evaluate(det, scenes, cfg.scene.image_size, factor_set=fs)
    eval_dir = os.path.join(out, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    report.write_ap(os.path.join(eval_dir, "ap.csv"), ap)
    names = [f"p{3 + i}" for i in range(len(energies))]
    print(f"ap50 {ap.ap50}  ap_small {ap.ap_small}  ap_medium {ap.ap_medium}  "
          f"ap_large {ap.ap_large}")
    print("saliency energy " + "  ".join(f"{n} {e:.4f}" for n, e in zip(names, energies)))
    return 0


def cmd_analyze(cfg: ExperimentConfig, args) -> int:
    out = _outputs(cfg, args)
    det, _, fs = load_checkpoint(_checkpoint_dir(cfg, args, out))
    scenes = _eval_split(cfg, args, out)
    ana = os.path.join(out, "analysis")
    os.makedirs(ana, exist_ok=True)
    geometry = det.level_geometry(cfg.scene.image_size)

    per_image = []
    for i, (img, annots) in enumerate(scenes):
        maps = saliency_maps(det, img, factor_set=fs)
        per_image.append(tuple(float(v) for v in
                               interference_metrics(maps, annots, geometry)))
        if i < args.images:
            for l, m in enumerate(maps):
                gray = np.clip(np.round(m * 255.0), 0, 255).astype(np.uint8)
                tensor_io.save_pgm(os.path.join(ana, f"saliency_{i:03d}_p{3 + l}.pgm"),
                                   gray)
            report.saliency_figure(img, maps,
                                   os.path.join(ana, f"saliency_{i:03d}.png"),
                                   annots=annots)
    report.write_interference(ana, per_image)
    mean = np.asarray(per_image).mean(axis=0)
    print("mean saliency energy " + "  ".join(
        f"p{3 + l} {v:.4f}" for l, v in enumerate(mean)))

    spec = det.connection
    grad_path = os.path.join(ana, "grad_check.txt")
    if spec is not None and not det.single_branch and spec.form != "complete":
        k = min(4, len(scenes))
        imgs = np.stack([scenes[i][0] for i in range(k)])
        annots = [scenes[i][1] for i in range(k)]
        rep = grad_decomposition_check(det, imgs, annots)
        text = report.grad_report_text(rep)
        with open(grad_path, "w") as f:
            f.write(text)
        print(text, end="")
    else:
        with open(grad_path, "w") as f:
            f.write("gradient split not applicable for this connection form\n")
        print("gradient split: not applicable for this connection form")
    print(f"analysis artifacts -> {ana}")
    return 0


def _parse_vector(text: str) -> np.ndarray:
    try:
        vec = np.array([float(t) for t in text.split(",") if t.strip() != ""])
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as comma-separated numbers")
    if vec.size < 2 or vec.size > 4:
        raise ConfigError(f"need 2 to 4 comma-separated values, got {vec.size}")
    return vec


def _fmt_vec(vec) -> str:
    return ", ".join(f"{v:g}" for v in vec)


def cmd_derive_strengths(args) -> int:
    if args.factors:
        lam = _parse_vector(args.factors)
        c = strengths_from_factors(lam)
        print(f"factors {_fmt_vec(lam)} -> strengths {_fmt_vec(c)}")
        print(f"strengths {_fmt_vec(c)} -> factors {_fmt_vec(factors_from_strengths(c))}")
    else:
        c = _parse_vector(args.strengths)
        lam = factors_from_strengths(c)
        print(f"strengths {_fmt_vec(c)} -> factors {_fmt_vec(lam)}")
        print(f"factors {_fmt_vec(lam)} -> strengths {_fmt_vec(strengths_from_factors(lam))}")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcdet",
                                description="multi-branch toy detector workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="experiment yaml")
        sp.add_argument("--seed", type=int, default=None,
                        help="restrict to one training seed")
        sp.add_argument("--out", default=None, help="override the outputs directory")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None,
                            help="checkpoint directory (default: first seed's run)")
            sp.add_argument("--dataset", default=None,
                            help="evaluate this split directory instead of the test split")

    common(sub.add_parser("generate", help="write the dataset directory"))
    common(sub.add_parser("train", help="train all configured seeds"))
    common(sub.add_parser("eval", help="score a checkpoint"), checkpoint=True)
    ana = sub.add_parser("analyze", help="saliency and gradient reports")
    common(ana, checkpoint=True)
    ana.add_argument("--images", type=int, default=4,
                     help="how many images get saliency figures")

    ds = sub.add_parser("derive-strengths",
                        help="convert between per-level factors and basis strengths")
    group = ds.add_mutually_exclusive_group(required=True)
    group.add_argument("--factors", help="comma-separated per-level factors")
    group.add_argument("--strengths", help="comma-separated basis strengths")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "derive-strengths":
            return cmd_derive_strengths(args)
        cfg = config_mod.load(args.config)
        if args.command == "generate":
            return cmd_generate(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "analyze":
            return cmd_analyze(cfg, args)
        raise RuntimeError(f"unhandled command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2
    except (PlacementError, TrainingDivergence) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
