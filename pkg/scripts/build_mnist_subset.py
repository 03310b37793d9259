"""Assemble a desk-scale MNIST subset as gzip'd IDX files.

Sources (both redistributable, fetched through the package mirror):

* npm ``mnist`` 1.1.0 (MIT): ~10k digits, one JSON file per class, pixel
  intensities stored as ``byte / 255`` rounded to 3 decimals.
* PyPI ``mlxtend`` (BSD-3): ``mnist_5k.csv.gz``, 500 digits per class,
  784 raw pixel bytes followed by the label.

Usage::

    npm pack mnist && pip download --no-deps mlxtend -d .
    python scripts/build_mnist_subset.py mnist-1.1.0.tgz mlxtend-*.whl data/mnist-subset
"""

import argparse
import gzip
import io
import json
import struct
import sys
import tarfile
import zipfile
from pathlib import Path

import numpy as np


def npm_digits(tgz_path):
    images, labels = [], []
    with tarfile.open(tgz_path) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            values = np.asarray(json.load(member)["data"], dtype=np.float64)
            pixels = np.rint(values * 255.0).astype(np.uint8).reshape(-1, 28, 28)
            images.append(pixels)
            labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def mlxtend_digits(whl_path):
    with zipfile.ZipFile(whl_path) as whl:
        raw = gzip.decompress(whl.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    # mtime=0 keeps the archive bytes reproducible
    with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
        gz.write(header + array.tobytes())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("npm_tgz")
    parser.add_argument("mlxtend_whl")
    parser.add_argument("out_dir")
    args = parser.parse_args(argv)

    x1, y1 = npm_digits(args.npm_tgz)
    x2, y2 = mlxtend_digits(args.mlxtend_whl)
    images = np.concatenate([x1, x2])
    labels = np.concatenate([y1, y2])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", images, 0x00000803)
    write_idx(out / "labels-idx1-ubyte.gz", labels, 0x00000801)
    counts = np.bincount(labels, minlength=10)
    print(f"wrote {len(labels)} images; per-class counts {counts.tolist()}", file=sys.stderr)


if __name__ == "__main__":
    main()
