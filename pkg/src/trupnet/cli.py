"""Command-line surface: synth-data, train, eval, predict, bench, gradcheck.

Progress goes to stderr; machine-readable outputs (CSV, key=value, image
files) go to files so runs stay diffable. Exit codes: 0 success, 1
contract/data error, 2 usage error.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .data import find_samples, load_sample, save_sample, synth_dataset, write_pgm
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
)
from .gradcheck import REL_TOL, check_model, run_op_checks
from .metrics import evaluate_dataset, measure_fps
from .model import ModelConfig, TransRUPNet
from .tensor import DTYPE, Tensor
from .train import TrainConfig, fit, restore_checkpoint


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _arch_config(arch: str, size: int) -> ModelConfig:
    if arch == "tiny":
        return ModelConfig.tiny(input_size=(size, size))
    return ModelConfig.default(input_size=(size, size))


def _cmd_synth_data(args) -> int:
    samples = synth_dataset(args.n, args.size, args.seed)
    out = Path(args.out)
    for s in samples:
        save_sample(s, out / "images", out / "masks")
    _log(f"wrote {len(samples)} samples to {out}")
    return 0


def _cmd_train(args) -> int:
    if args.resume:
        model, optim, start_epoch, seed = restore_checkpoint(args.resume)
        if seed != args.seed:
            _log(f"note: resume checkpoint was trained with seed {seed}")
        size = model.config.input_size[0]
    else:
        model = TransRUPNet(_arch_config(args.arch, args.size), seed=args.seed)
        optim, start_epoch = None, 0
        size = args.size
    dataset = find_samples(args.data, (model.config.input_size[0], model.config.input_size[1]))
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        augment=not args.no_augment,
    )
    _log(f"training on {len(dataset)} samples at {size}x{size} for {args.epochs} epochs")
    fit(model, dataset, cfg, out_dir=args.out, optim=optim, start_epoch=start_epoch, log=_log)
    _log(f"final checkpoint at {Path(args.out) / 'checkpoint'}")
    return 0


def _cmd_eval(args) -> int:
    model = TransRUPNet.load(args.ckpt)
    dataset = find_samples(args.data, model.config.input_size)
    report = evaluate_dataset(model, dataset, args.threshold)
    report.write_csv(args.out)
    a = report.aggregate
    _log(
        f"{report.n_images} images: mDSC {a.mdsc:.4f} mIoU {a.miou:.4f} "
        f"recall {a.recall:.4f} precision {a.precision:.4f} F2 {a.f2:.4f}"
    )
    return 0


def _cmd_predict(args) -> int:
    model = TransRUPNet.load(args.ckpt)
    sample = load_sample(args.image, args.mask, model.config.input_size) if args.mask else None
    if sample is None:
        from .data import read_ppm
        from .ops import resize_bilinear_array

        img = read_ppm(args.image)
        chw = np.ascontiguousarray(img.transpose(2, 0, 1)).astype(DTYPE) / DTYPE(255.0)
        h, w = model.config.input_size
        if img.shape[:2] != (h, w):
            chw = resize_bilinear_array(chw, h, w)
        x = Tensor(chw[np.newaxis])
    else:
        x = Tensor(sample.image.data[np.newaxis])
    mask = model.predict_mask(x, args.threshold)
    write_pgm(args.out, (mask.data[0, 0] * 255).astype(np.uint8))
    _log(f"wrote mask to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    if args.ckpt:
        model = TransRUPNet.load(args.ckpt)
    else:
        model = TransRUPNet(_arch_config(args.arch, args.size), seed=args.seed)
    h, w = model.config.input_size
    stats = measure_fps(
        lambda x: model.forward(x, mode="eval"),
        (1, 3, h, w),
        n_warmup=args.warmup,
        n_timed=args.frames,
        clock=time.perf_counter,
    )
    Path(args.out).write_text(stats.to_text())
    _log(f"{stats.n_frames} frames in {stats.total_seconds:.3f}s -> {stats.fps:.2f} fps")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_op_checks(seed=args.seed, seeds_per_op=args.repeats)
    failed = []
    for name in sorted(results):
        err = results[name]
        status = "PASS" if err <= REL_TOL else "FAIL"
        _log(f"{name:24s} max_rel_err={err:.3e} {status}")
        if err > REL_TOL:
            failed.append(name)
    model_err = check_model(seed=args.seed, n_sample=args.model_params)
    status = "PASS" if model_err <= REL_TOL else "FAIL"
    _log(f"{'full_model':24s} max_rel_err={model_err:.3e} {status}")
    if model_err > REL_TOL:
        failed.append("full_model")
    if failed:
        _log(f"FAILED: {', '.join(failed)}")
        return 1
    _log("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trupnet", description="Train and evaluate the segmentation model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=("default", "tiny"), default="default")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="segment a single PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", default=None, help="optional ground-truth PGM (resized alongside)")
    p.add_argument("--out", default="mask.pgm")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("bench", help="measure single-image inference FPS")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--arch", choices=("default", "tiny"), default="default")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--out", default="fps.txt")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--repeats", type=int, default=5, help="random draws per op")
    p.add_argument("--model-params", type=int, default=200, help="sampled parameters for the full-model check")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (ShapeError, ContractError, DataError, FormatError, CheckpointError, NumericError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
