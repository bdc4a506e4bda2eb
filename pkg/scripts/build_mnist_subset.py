"""Write a stratified MNIST subset as standard gzip IDX files.

The source is the 5000-sample MNIST extract distributed inside the mlxtend
wheel (``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the
label, 500 images per digit). Pass either that csv.gz, the wheel itself, or
nothing when mlxtend is importable.

    python scripts/build_mnist_subset.py --source mlxtend-0.24.0-py3-none-any.whl \
        --out data/mnist --test-per-class 100
"""

import argparse
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from koopcon.datasets import LabeledImages, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(source):
    if source is None:
        import mlxtend  # noqa: F401  (only needed to locate the file)

        source = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    source = Path(source)
    if source.suffix == ".whl":
        blob = zipfile.ZipFile(source).read(CSV_MEMBER)
    else:
        blob = source.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(blob).decode()), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 1, 28, 28).astype(np.uint8), table[:, -1]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--source", default=None)
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    pixels, labels = read_source(args.source)
    rng = np.random.default_rng(args.seed)
    test_idx = np.concatenate(
        [rng.permutation(np.flatnonzero(labels == k))[: args.test_per_class] for k in range(10)]
    )
    is_test = np.zeros(len(labels), dtype=bool)
    is_test[test_idx] = True

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, mask, prefix in (("train", ~is_test, "train"), ("test", is_test, "t10k")):
        # shuffle so files are not sorted by class, like the official release
        order = rng.permutation(np.flatnonzero(mask))
        data = LabeledImages(pixels[order] / 255.0, labels[order], 10, f"mnist:{split}")
        image_bytes, label_bytes = write_idx(data)
        # mtime=0 keeps the gzip output byte-stable across rebuilds
        (out / f"{prefix}-images-idx3-ubyte.gz").write_bytes(gzip.compress(image_bytes, mtime=0))
        (out / f"{prefix}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(label_bytes, mtime=0))
        print(f"{split}: {len(order)} images -> {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
