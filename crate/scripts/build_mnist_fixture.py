#!/usr/bin/env python3
"""Write the bundled MNIST subset as IDX files.

Source: the `mnist` npm package (MIT, 10k digits stored as JSON floats in
[0,1] with three decimals). Usage:

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/build_mnist_fixture.py package/src/digits crates/core/data

Images are interleaved by class so any prefix is roughly class balanced.
"""
import json
import os
import struct
import sys

SIDE = 28
TRAIN_PER_CLASS = 100
TEST_PER_CLASS = 20


def write_idx(prefix, images, labels):
    with open(prefix + "-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))
    with open(prefix + "-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    digits = []
    for c in range(10):
        with open(os.path.join(src, f"{c}.json")) as f:
            raw = json.load(f)["data"]
        px = [min(255, max(0, round(v * 255))) for v in raw]
        digits.append([px[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(len(px) // (SIDE * SIDE))])
    for name, lo, hi in [("mnist-train-1k", 0, TRAIN_PER_CLASS),
                         ("mnist-test-200", TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS)]:
        images, labels = [], []
        for k in range(lo, hi):
            for c in range(10):
                images.append(digits[c][k])
                labels.append(c)
        write_idx(os.path.join(dst, name), images, labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
