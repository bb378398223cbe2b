"""Command-line interface: train, infer, eval, params, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
abort (non-finite loss), 4 checkpoint/spec mismatch, 5 gradient-check
failure. Nothing is printed to stderr on success.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from .autograd import Rng, Tensor
from .config import ConfigError, RunConfig, load_config, render_config
from .data import (
    CheckpointError,
    DataError,
    NiftiError,
    build_slice_dataset,
    generate_phantom,
    load_checkpoint,
    load_into_model,
    read_nifti,
    save_checkpoint,
    write_pgm,
)
from .gradcheck import TOLERANCE, run_suite
from .metrics import probs_to_mask
from .model import (
    ModelSpec,
    build_model,
    count_parameters,
    format_parameter_table,
    forward,
    parameter_table_csv,
)
from .preprocess import WindowSpec
from .train import NumericError, TrainConfig, kfold_split, split_slices, train, evaluate

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4
EXIT_GRADCHECK = 5

PHANTOM_RE = re.compile(r"^phantoms:(\d+)x(\d+)$")


def _model_spec(cfg: RunConfig) -> ModelSpec:
    return ModelSpec(
        variant=cfg.model_variant,
        base_depth=cfg.model_base_depth,
        num_classes=cfg.model_num_classes,
        kernel=cfg.model_kernel,
        dropout_rate=cfg.train_dropout,
    )


def _load_dataset(data_spec: str, cfg: RunConfig):
    """Either a phantoms:NxS directive or a directory of paired
    volume-<id>.nii / segmentation-<id>.nii files."""
    m = PHANTOM_RE.match(data_spec)
    if m:
        n, size = int(m.group(1)), int(m.group(2))
        return generate_phantom(Rng(cfg.seed, 9), size, n), True
    if not os.path.isdir(data_spec):
        raise DataError(f"data directory {data_spec!r} does not exist")
    volumes, masks = {}, {}
    for fname in sorted(os.listdir(data_spec)):
        m = re.match(r"^volume-(.+)\.nii$", fname)
        if not m:
            continue
        vid = m.group(1)
        mask_path = os.path.join(data_spec, f"segmentation-{vid}.nii")
        if not os.path.exists(mask_path):
            raise DataError(f"missing mask volume for {vid!r}")
        volumes[vid] = read_nifti(os.path.join(data_spec, fname))
        masks[vid] = read_nifti(mask_path)
    if not volumes:
        raise DataError(f"no volume-*.nii files found in {data_spec!r}")
    window = WindowSpec(cfg.data_window_low, cfg.data_window_high)
    samples = build_slice_dataset(volumes, masks, window, cfg.data_resize,
                                  slice_filter="lesion")
    return samples, False


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    samples, is_phantom = _load_dataset(args.data, cfg)
    if is_phantom or len({s.volume_id for s in samples}) < cfg.folds:
        train_set, val_set = split_slices(samples, cfg.folds, cfg.fold_index, cfg.seed)
    else:
        train_set, val_set = kfold_split(samples, cfg.folds, cfg.fold_index, cfg.seed)
    spec = _model_spec(cfg)
    tc = TrainConfig(
        iterations=cfg.train_iterations,
        batch_size=cfg.train_batch_size,
        lr=cfg.train_lr,
        dropout=cfg.train_dropout,
        folds=cfg.folds,
        fold_index=cfg.fold_index,
        seed=cfg.seed,
        eval_every=cfg.train_eval_every,
        augment=cfg.train_augment,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved"), "w") as fh:
        fh.write(render_config(cfg))

    def log(rec):
        print(f"iter {rec.iteration}: loss {rec.loss:.4f} "
              f"train_dice {rec.train_dice:.3f} val_dice {rec.val_dice:.3f}")

    train(spec, tc, train_set, val_set, out_dir=args.out, log_fn=log)
    print(f"wrote best.ckpt and final.ckpt to {args.out}")
    return 0


def _load_model_from_checkpoint(args, cfg):
    spec = _model_spec(cfg)
    model = build_model(spec, Rng(cfg.seed, 0))
    load_into_model(model, load_checkpoint(args.checkpoint))
    return model


def _input_samples(path, cfg):
    m = PHANTOM_RE.match(path)
    if m:
        return generate_phantom(Rng(cfg.seed, 9), int(m.group(2)), int(m.group(1)))
    vol = read_nifti(path)
    window = WindowSpec(cfg.data_window_low, cfg.data_window_high)
    from .preprocess import histogram_equalize, resize_bilinear, window_hu
    from .data import SliceSample

    samples = []
    for i in range(vol.dims[2]):
        img = resize_bilinear(histogram_equalize(window_hu(vol.voxels[i], window)),
                              cfg.data_resize)
        samples.append(SliceSample(img[None], np.zeros(img.shape, dtype=np.int64),
                                   os.path.basename(path), i))
    return samples


def cmd_infer(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    model = _load_model_from_checkpoint(args, cfg)
    samples = _input_samples(args.input, cfg)
    os.makedirs(args.out, exist_ok=True)
    lesion_pixels = []
    for i in range(0, len(samples), 8):
        chunk = samples[i : i + 8]
        x = Tensor(np.stack([s.image for s in chunk]))
        pred = probs_to_mask(forward(model, x, mode="infer"), args.lesion_class)
        for j, s in enumerate(chunk):
            write_pgm(pred[j], os.path.join(args.out, f"slice_{s.slice_index:04d}.pgm"))
            lesion_pixels.append((s.slice_index, int(pred[j].sum())))
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write("slice_index,lesion_pixels\n")
        for idx, count in lesion_pixels:
            fh.write(f"{idx},{count}\n")
    print(f"wrote {len(lesion_pixels)} slice masks to {args.out}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    model = _load_model_from_checkpoint(args, cfg)
    samples, _ = _load_dataset(args.data, cfg)
    rows, means = evaluate(model, samples, lesion_class=args.lesion_class)
    header = f"{'volume':<12} {'overlap':>8} {'dice':>8} {'jaccard':>8} " \
             f"{'overlap_g':>10} {'dice_g':>8} {'jaccard_g':>10}"
    print(header)
    for r in rows:
        print(f"{r['volume_id']:<12} {r['overlap']:>8.4f} {r['dice']:>8.4f} "
              f"{r['jaccard']:>8.4f} {r['overlap_global']:>10.4f} "
              f"{r['dice_global']:>8.4f} {r['jaccard_global']:>10.4f}")
    print(f"{'mean':<12} {means['overlap']:>8.4f} {means['dice']:>8.4f} "
          f"{means['jaccard']:>8.4f} {means['overlap_global']:>10.4f} "
          f"{means['dice_global']:>8.4f} {means['jaccard_global']:>10.4f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("volume_id,overlap,dice,jaccard,overlap_global,dice_global,jaccard_global\n")
            for r in rows:
                fh.write(f"{r['volume_id']},{r['overlap']},{r['dice']},{r['jaccard']},"
                         f"{r['overlap_global']},{r['dice_global']},{r['jaccard_global']}\n")
    return 0


def cmd_params(args):
    def table(variant):
        spec = ModelSpec(variant=variant, base_depth=args.base_depth,
                         num_classes=args.num_classes, kernel=args.kernel)
        model = build_model(spec, Rng(0, 0))
        return count_parameters(model)

    if args.compare:
        _, proposed_total = table("proposed")
        _, baseline_total = table("baseline-unet")
        print(f"proposed total:  {proposed_total}")
        print(f"baseline total:  {baseline_total}")
        print(f"reduction ratio: {baseline_total / proposed_total:.2f}x")
        return 0
    rows, total = table(args.variant)
    if args.csv:
        print(parameter_table_csv(rows, total))
    else:
        print(format_parameter_table(rows, total))
    return 0


def cmd_gradcheck(args):
    results = run_suite(args.scope)
    worst = {}
    for name, wrt, _, err in results:
        key = (name, wrt)
        worst[key] = max(worst.get(key, 0.0), err)
    failed = None
    for (name, wrt), err in sorted(worst.items()):
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name}[{wrt}]: max_rel_err={err:.3e} {status}")
        if err > TOLERANCE and failed is None:
            failed = f"{name}[{wrt}]"
    if failed:
        print(f"gradient check failed for {failed}")
        return EXIT_GRADCHECK
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sepseg",
        description="Lightweight separable-convolution CT lesion segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data", required=True, help="data dir or phantoms:NxS")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment a volume with a checkpoint")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".nii volume or phantoms:NxS")
    p.add_argument("--out", required=True)
    p.add_argument("--lesion-class", type=int, default=1)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint against labelled data")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lesion-class", type=int, default=1)
    p.add_argument("--csv", help="also write machine-readable rows here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("params", help="parameter audit")
    p.add_argument("--variant", choices=("proposed", "baseline-unet"),
                   default="proposed")
    p.add_argument("--base-depth", type=int, default=64)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--compare", action="store_true",
                   help="print both totals and the reduction ratio")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("scope", choices=("layers", "block", "model"))
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NiftiError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
