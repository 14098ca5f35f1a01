"""Train the desk CapsNet used by the acceptance suite and the experiments.

    python scripts/train_capsnet.py --epochs 8 --out artifacts/capsnet_desk.ckpt

Trains on the bundled 4000-digit split with the standard recipe (Adam,
lr 1e-3, batch 10, seed 0) and logs test accuracy and the median SSIM of
theoretical reconstructions of 50 sixes and 50 nines after every epoch.
A checkpoint is written per epoch, so a longer run also yields every
shorter one: epoch e is identical whatever the total.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from capsdec import capsnet as C
from capsdec.data_io import export_mnist_subset, load_mnist_dir, select_stimuli
from capsdec.metrics import ssim
from capsdec.pipeline import stage_one


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mnist-dir", type=Path, default=Path("data/mnist5k"))
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("artifacts/capsnet_desk.ckpt"))
    args = ap.parse_args()

    if not (args.mnist_dir / "t10k-labels-idx1-ubyte").exists():
        export_mnist_subset(args.mnist_dir)
    x_train, y_train = load_mnist_dir(args.mnist_dir, "train")
    x_test, y_test = load_mnist_dir(args.mnist_dir, "test")
    stimuli, _ = select_stimuli(x_test, y_test, 50)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def report(epoch, loss, model):
        acc = C.accuracy(model, x_test[:, None], y_test)
        theory = stage_one(model, stimuli).theoretical
        med = np.median([ssim(a, b) for a, b in zip(stimuli, theory)])
        print(f"epoch {epoch} loss {loss:.4f} test_accuracy {acc:.4f} median_theoretical_ssim {med:.4f} "
              f"elapsed {time.time() - t0:.0f}s", flush=True)
        C.save_model(model, args.out.with_name(f"{args.out.stem}_ep{epoch}{args.out.suffix}"))

    model = C.init_model(seed=args.seed)
    C.train(model, x_train, y_train, C.TrainConfig(epochs=args.epochs, seed=args.seed), on_epoch=report)
    C.save_model(model, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
