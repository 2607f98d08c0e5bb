"""Build the bundled 5000-image MNIST subset as IDX files.

The source is ``mnist_5k.csv.gz`` shipped inside the ``mlxtend`` wheel
(500 images per digit, 784 pixel columns then the label). We split it
per class into 400 train / 100 test images and write gzipped IDX files.

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist5k
"""

import argparse
import gzip
import pathlib

import numpy as np

from at2l.data import Dataset, save_mnist_idx, stratified_split


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with gzip.open(args.csv, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pix, y = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    train_idx, test_idx = stratified_split(y, args.test_per_class, args.seed)

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        ds = Dataset(pix[idx, :, :, None] / 255.0, y[idx], 10, name)
        save_mnist_idx(ds, out / f"{name}-images-idx3-ubyte.gz", out / f"{name}-labels-idx1-ubyte.gz")
        print(f"{name}: {len(ds)} images")


if __name__ == "__main__":
    main()
