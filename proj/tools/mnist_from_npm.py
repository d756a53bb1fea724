#!/usr/bin/env python3
"""Convert the digit dumps shipped in the `mnist` npm package into IDX files.

The npm package (github.com/cazala/mnist, MIT) bundles 10,000 MNIST digits as
per-class JSON arrays of 784 floats in [0,1] with three decimals. This script
maps them back to bytes, splits each class deterministically (first 70% train,
rest test) and writes gzipped big-endian IDX files with the standard names.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import os
import struct


def write_idx_images(path, images, rows=28, cols=28):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-fraction", type=float, default=0.7)
    args = ap.parse_args()

    train, test = [], []
    for digit in range(10):
        with open(os.path.join(args.digits_dir, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        count = len(flat) // 784
        samples = []
        for i in range(count):
            px = flat[i * 784:(i + 1) * 784]
            samples.append([max(0, min(255, round(v * 255))) for v in px])
        cut = int(round(count * args.train_fraction))
        train += [(s, digit) for s in samples[:cut]]
        test += [(s, digit) for s in samples[cut:]]

    os.makedirs(args.out_dir, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte.gz"),
                         [s for s, _ in split])
        write_idx_labels(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte.gz"),
                         [d for _, d in split])
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main()
