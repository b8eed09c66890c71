#!/usr/bin/env python3
"""Builds an IDX-format MNIST subset from the digits bundled in the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST digits as
JSON arrays of pixel intensities rounded to three decimals; multiplying by 255 and
rounding recovers the original bytes exactly.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    tools/make_mnist_subset.py package/src/digits OUT_DIR [--test 2000]
"""
import argparse
import json
import os
import random
import struct


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        with open(os.path.join(args.digits_dir, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(0, len(flat), 784):
            pixels = [int(round(v * 255.0)) for v in flat[i:i + 784]]
            samples.append((pixels, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]

    os.makedirs(args.out_dir, exist_ok=True)
    for prefix, part in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out_dir, f"{prefix}-images-idx3-ubyte"), [s[0] for s in part])
        write_idx_labels(os.path.join(args.out_dir, f"{prefix}-labels-idx1-ubyte"), [s[1] for s in part])
    print(f"train={len(train)} test={len(test)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
