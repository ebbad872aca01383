#!/usr/bin/env python3
"""Convert the 10k MNIST digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Writes train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz (8000 samples)
and t10k-images-idx3-ubyte.gz / t10k-labels-idx1-ubyte.gz (2000 samples).
The split is a fixed seeded permutation so the files are reproducible.
"""

import gzip
import json
import os
import random
import struct
import sys

SIDE = 28
N_TRAIN = 8000


def load_digits(digits_dir):
    samples = []
    for label in range(10):
        with open(os.path.join(digits_dir, f"{label}.json")) as f:
            raw = json.load(f)["data"]
        count = len(raw) // (SIDE * SIDE)
        for i in range(count):
            pixels = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((label, bytes(min(255, max(0, round(v * 255))) for v in pixels)))
    return samples


def write_idx(path_images, path_labels, samples):
    # mtime=0 keeps the gzip bytes reproducible.
    with open(path_images, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for _, pixels in samples:
            f.write(pixels)
    with open(path_labels, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for label, _ in samples))


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    digits_dir, out_dir = sys.argv[1], sys.argv[2]
    samples = load_digits(digits_dir)
    random.Random(20210107).shuffle(samples)
    os.makedirs(out_dir, exist_ok=True)
    write_idx(os.path.join(out_dir, "train-images-idx3-ubyte.gz"),
              os.path.join(out_dir, "train-labels-idx1-ubyte.gz"), samples[:N_TRAIN])
    write_idx(os.path.join(out_dir, "t10k-images-idx3-ubyte.gz"),
              os.path.join(out_dir, "t10k-labels-idx1-ubyte.gz"), samples[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(samples) - N_TRAIN} test samples to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
