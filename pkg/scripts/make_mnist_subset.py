"""Write a 5000-image MNIST subset (500 per digit) as gzipped IDX files.

The images come from the ``mnist_5k.csv.gz`` file bundled with mlxtend, read
straight out of the installed package or a downloaded wheel:

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/make_mnist_subset.py --wheel /tmp/wheels/mlxtend-*.whl

Output: data/mnist/{train,test}-{images-idx3,labels-idx1}-ubyte.gz with the
first 400 images of each digit in train and the remaining 100 in test.
"""

import argparse
import gzip
import importlib.util
import io
import zipfile
from pathlib import Path

import numpy as np

from keyward.data import serialize_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(wheel):
    if wheel:
        return zipfile.ZipFile(wheel).read(MEMBER)
    spec = importlib.util.find_spec("mlxtend")
    if spec is None:
        raise SystemExit("mlxtend not installed; pass --wheel")
    return (Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", default=None)
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    table = np.loadtxt(io.StringIO(gzip.decompress(read_csv_gz(args.wheel)).decode()), delimiter=",")
    X, y = table[:, :-1] / 255.0, table[:, -1].astype(np.int64)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[: args.train_per_class])
        test_idx.append(idx[args.train_per_class :])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.sort(np.concatenate(train_idx))), ("test", np.sort(np.concatenate(test_idx)))):
        (out / f"{split}-images-idx3-ubyte.gz").write_bytes(
            gzip.compress(serialize_idx(X[idx], (28, 28)), mtime=0)
        )
        (out / f"{split}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(serialize_idx(y[idx]), mtime=0))
        print(f"{split}: {len(idx)} images")


if __name__ == "__main__":
    main()
