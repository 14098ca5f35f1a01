"""Command-line entry point: ``capsdec <command> [options]``.

Commands: train-capsnet, simulate, encode, train-decoder, reconstruct, evaluate.
Every command prints its resolved configuration before running and exits
with status 2 on bad input.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import capsnet as C
from .checkpoint import CheckpointError
from .data_io import (FormatError, SynthConfig, VoxelDataset, load_fmri_csv, load_mnist_dir,
                      select_stimuli, synthesize_fmri, write_fmri_csv)
from .encoding import build_encoding, load_encoding, save_encoding
from .fmri_decoder import DecoderConfig, load_decoder, save_decoder, train_decoder
from .pipeline import (ConfigurationError, EvalConfig, cross_validate, encode_pgm,
                       reconstruct_from_fmri, stage_one, write_report)
from .tensor import DimensionError


class UsageError(Exception):
    pass


def _threads():
    n = os.environ.get("CAPSDEC_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _print_config(command: str, args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps({"command": command, **resolved}, sort_keys=True))


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_capsnet(path: Path) -> C.CapsNetModel:
    return C.load_model(_need(path, "CapsNet checkpoint"))


def cmd_train_capsnet(args) -> None:
    d = _need(args.mnist_dir, "MNIST directory")
    try:
        x_train, y_train = load_mnist_dir(d, "train")
        x_test, y_test = load_mnist_dir(d, "test")
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if args.train_limit:
        x_train, y_train = x_train[: args.train_limit], y_train[: args.train_limit]
    if args.test_limit:
        x_test, y_test = x_test[: args.test_limit], y_test[: args.test_limit]
    model = C.init_model(C.CapsNetConfig(), seed=args.seed)

    def report(epoch, loss, m):
        acc = C.accuracy(m, x_test[:, None], y_test)
        print(f"epoch {epoch} loss {loss:.6f} test_accuracy {acc:.4f}", flush=True)

    C.train(model, x_train, y_train, C.TrainConfig(args.epochs, args.batch_size, args.seed), on_epoch=report)
    acc = C.accuracy(model, x_test[:, None], y_test)
    C.save_model(model, args.out)
    print(f"final test_accuracy {acc:.4f} ({len(y_test)} images)")
    print(f"wrote {args.out}")


def cmd_simulate(args) -> None:
    capsnet = _load_capsnet(args.capsnet)
    if capsnet.config.num_classes <= 9:
        raise UsageError("simulation needs a CapsNet with classes 6 and 9")
    try:
        x_test, y_test = load_mnist_dir(_need(args.mnist_dir, "MNIST directory"), "test")
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if args.n % 2:
        raise UsageError("--n must be even (equal numbers of 6 and 9)")
    images, labels = select_stimuli(x_test, y_test, args.n // 2, seed=args.seed)
    cfg = SynthConfig(args.signal, args.sigma, args.seed, args.voxels)
    ds = synthesize_fmri(capsnet, images, labels, cfg)
    write_fmri_csv(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} samples, V={ds.num_voxels}, {ds.provenance}")


def cmd_encode(args) -> None:
    capsnet = _load_capsnet(args.capsnet)
    ds = load_fmri_csv(_need(args.fmri, "fMRI CSV"))
    stage = stage_one(capsnet, ds.images)
    enc = build_encoding(stage.features, ds.voxels, args.k)
    save_encoding(enc, args.out)
    print(f"selected {enc.k} voxels; top R^2 {enc.r2[enc.selected[0]]:.4f}, k-th R^2 {enc.r2[enc.selected[-1]]:.4f}")
    print(f"wrote {args.out}")


def _classes(text: str) -> tuple[int, ...]:
    return tuple(int(c) for c in text.split(","))


def cmd_train_decoder(args) -> None:
    capsnet = _load_capsnet(args.capsnet)
    ds = load_fmri_csv(_need(args.fmri, "fMRI CSV"))
    enc = load_encoding(_need(args.encoding, "encoding checkpoint"))
    if enc.weights.shape[0] != ds.num_voxels:
        raise ConfigurationError(f"encoding was fitted on {enc.weights.shape[0]} voxels, CSV has {ds.num_voxels}")
    stage = stage_one(capsnet, ds.images)
    classes = _classes(args.classes)
    targets = stage.capsules[:, list(classes)]
    cfg = DecoderConfig(epochs=args.epochs, seed=args.seed)
    dec = train_decoder(ds.voxels[:, enc.selected], targets, cfg, classes, enc.selected)
    save_decoder(dec, args.out)
    print(f"final training loss {dec.loss_history[-1]:.6g}")
    print(f"wrote {args.out}")


def cmd_reconstruct(args) -> None:
    capsnet = _load_capsnet(args.capsnet)
    enc = load_encoding(_need(args.encoding, "encoding checkpoint"))
    dec = load_decoder(_need(args.decoder, "decoder checkpoint"))
    ds = load_fmri_csv(_need(args.fmri, "fMRI CSV"))
    images, chosen = reconstruct_from_fmri(capsnet, enc, dec, ds.voxels)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    lines = ["sample,chosen_class"]
    for i, (img, cls) in enumerate(zip(images, chosen)):
        (out / f"{i:03d}_pred.pgm").write_bytes(encode_pgm(img))
        lines.append(f"{i},{int(cls)}")
    (out / "chosen_classes.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(chosen)} reconstructions to {out}")


def cmd_evaluate(args) -> None:
    capsnet = _load_capsnet(args.capsnet)
    ds: VoxelDataset = load_fmri_csv(_need(args.fmri, "fMRI CSV"))
    if not 1 <= args.k <= ds.num_voxels:
        raise UsageError(f"--k {args.k} outside 1..{ds.num_voxels}")
    if not 2 <= args.folds <= len(ds):
        raise UsageError(f"--folds {args.folds} needs 2..{len(ds)}")
    cfg = EvalConfig(k=args.k, folds=args.folds, seed=args.seed, candidate_classes=_classes(args.classes),
                     decoder=DecoderConfig(epochs=args.decoder_epochs), ssim_window=args.ssim_window)
    report = cross_validate(ds, capsnet, cfg)
    write_report(report, args.out)
    t = report.aggregate("theoretical")
    print(report.table(), end="")
    print(f"class accuracy {report.class_accuracy:.3f}; theoretical SSIM {t.ssim:.3f}")
    print("Algorithms\tMSE\tPCC\tSSIM")
    print(report.summary_row())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsdec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-capsnet", help="train the CapsNet on MNIST IDX files")
    s.add_argument("--mnist-dir", type=Path, required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-limit", type=int, default=0, help="use only the first N training images")
    s.add_argument("--test-limit", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_capsnet)

    s = sub.add_parser("simulate", help="write a synthetic fMRI CSV driven by CapsNet features")
    s.add_argument("--capsnet", type=Path, required=True)
    s.add_argument("--mnist-dir", type=Path, required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--sigma", type=float, default=0.25)
    s.add_argument("--signal", type=int, default=100)
    s.add_argument("--voxels", type=int, default=3092)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("encode", help="fit per-voxel encoding models and select the top-k voxels")
    s.add_argument("--capsnet", type=Path, required=True)
    s.add_argument("--fmri", type=Path, required=True)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train-decoder", help="train the voxel-to-capsule network on all samples")
    s.add_argument("--capsnet", type=Path, required=True)
    s.add_argument("--fmri", type=Path, required=True)
    s.add_argument("--encoding", type=Path, required=True)
    s.add_argument("--classes", default="6,9")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_decoder)

    s = sub.add_parser("reconstruct", help="reconstruct every CSV sample from its voxels")
    s.add_argument("--capsnet", type=Path, required=True)
    s.add_argument("--encoding", type=Path, required=True)
    s.add_argument("--decoder", type=Path, required=True)
    s.add_argument("--fmri", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="k-fold cross-validated reconstruction with MSE/PCC/SSIM")
    s.add_argument("--capsnet", type=Path, required=True)
    s.add_argument("--fmri", type=Path, required=True)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", default="6,9")
    s.add_argument("--decoder-epochs", type=int, default=200)
    s.add_argument("--ssim-window", type=int, default=7)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _print_config(args.command, args)
    try:
        with _threads():
            args.func(args)
    except (UsageError, FormatError, CheckpointError, ConfigurationError, DimensionError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
