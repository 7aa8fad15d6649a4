#!/usr/bin/env python3
"""Convert the digits shipped in the `mnist` npm package into gzipped IDX files.

Usage: mnist_npm_to_idx.py <package-dir> <out-dir> [n_train] [n_test]

The package stores ~1000 images per digit as pixel/255 rounded to three
decimals. Images are interleaved digit by digit so any prefix is balanced.
"""
import gzip
import json
import os
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 5000
    n_test = int(sys.argv[4]) if len(sys.argv) > 4 else 1000
    per_digit = []
    for d in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as f:
            raw = json.load(f)["data"]
        per_digit.append([raw[i:i + 784] for i in range(0, len(raw) - 783, 784)])
    order = []
    for i in range(max(len(p) for p in per_digit)):
        for p in per_digit:
            if i < len(p):
                order.append(p[i])
    if n_train + n_test > len(order):
        sys.exit(f"only {len(order)} images available")

    def write(path, images):
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
            f.write(bytes(min(255, max(0, round(v * 255))) for img in images for v in img))

    os.makedirs(out, exist_ok=True)
    write(os.path.join(out, "train-images-idx3-ubyte.gz"), order[:n_train])
    write(os.path.join(out, "t10k-images-idx3-ubyte.gz"), order[n_train:n_train + n_test])


if __name__ == "__main__":
    main()
