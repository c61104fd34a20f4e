"""Rebuild the MNIST subset under crates/dictnet/tests/data.

Input: the per-digit JSON files shipped by the npm package `mnist`
(`node_modules/mnist/src/digits/{0..9}.json`). The first 500 images of each
digit form the training split and the next 100 the test split; both are
shuffled with a fixed seed and written as gzip IDX files with mtime 0 so the
output is byte-stable.

Usage: python make_mnist_subset.py <digits-dir> <out-dir>
"""
import gzip
import json
import struct
import sys

import numpy as np


def main(src, out):
    train, test = [], []
    for digit in range(10):
        with open(f"{src}/{digit}.json") as f:
            pixels = np.array(json.load(f)["data"])
        images = np.round(pixels * 255).astype(np.uint8).reshape(-1, 784)
        train += [(im, digit) for im in images[:500]]
        test += [(im, digit) for im in images[500:600]]
    rng = np.random.RandomState(20161)
    for items, prefix in ((train, "train"), (test, "t10k")):
        order = rng.permutation(len(items))
        images = np.stack([items[i][0] for i in order])
        labels = np.array([items[i][1] for i in order], np.uint8)
        with gzip.GzipFile(f"{out}/{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(labels), 28, 28))
            f.write(images.tobytes())
        with gzip.GzipFile(f"{out}/{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(labels)))
            f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
