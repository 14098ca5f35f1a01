"""Write the bundled 5000-digit MNIST sample as IDX files (4000 train / 1000 test).

    python scripts/prepare_mnist_subset.py --out data/mnist5k

The test split holds 100 digits per class; the rest is training data.
Requires ``mlxtend`` (``pip install --no-deps mlxtend``).
"""

import argparse
from pathlib import Path

from capsdec.data_io import export_mnist_subset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/mnist5k"))
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    counts = export_mnist_subset(args.out, args.test_per_class, args.seed)
    print(f"wrote {counts['train']} training and {counts['test']} test digits to {args.out}")


if __name__ == "__main__":
    main()
