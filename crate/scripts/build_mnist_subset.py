#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the end-to-end tests.

Source: the `mnist` npm package (MIT), which ships 10,000 MNIST digits as
per-class JSON arrays of 784 intensities scaled to [0, 1] with 3 decimals.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/build_mnist_subset.py package/src/digits data/mnist-desk

Classes are interleaved round-robin, the first 5,000 samples become the
training split and the remaining 5,000 the test split. Output files are
gzip-compressed IDX (big-endian headers, magic 0x803 / 0x801).
"""
import gzip
import json
import os
import struct
import sys

SIDE = 28
TRAIN = 5000


def main(src, dst):
    per_class = []
    for c in range(10):
        with open(os.path.join(src, f"{c}.json")) as f:
            flat = json.load(f)["data"]
        n = len(flat) // (SIDE * SIDE)
        per_class.append([flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)])

    samples = []
    longest = max(len(v) for v in per_class)
    for i in range(longest):
        for c in range(10):
            if i < len(per_class[c]):
                samples.append((c, per_class[c][i]))

    os.makedirs(dst, exist_ok=True)
    for split, chunk in (("train", samples[:TRAIN]), ("test", samples[TRAIN:])):
        pixels = bytearray()
        for _, img in chunk:
            pixels.extend(max(0, min(255, round(v * 255))) for v in img)
        images = struct.pack(">IIII", 0x803, len(chunk), SIDE, SIDE) + bytes(pixels)
        labels = struct.pack(">II", 0x801, len(chunk)) + bytes(c for c, _ in chunk)
        with gzip.GzipFile(os.path.join(dst, f"{split}-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
            f.write(images)
        with gzip.GzipFile(os.path.join(dst, f"{split}-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
            f.write(labels)
        print(split, len(chunk))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
