#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package into gzipped IDX files.

The npm package ships 10000 MNIST digits as [0,1] floats rounded to three
decimals. Pixels are mapped back to bytes with round(v * 255). Every sixth
instance of each digit goes to the test split, the rest to train.

usage: convert_npm_mnist.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src = Path(sys.argv[1]) / "src" / "digits"
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(raw) // 784
        for i in range(count):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            split = "t10k" if i % 6 == 5 else "train"
            splits[split][0].append(pixels)
            splits[split][1].append(digit)
    for name, (images, labels) in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(images), 28, 28], b"".join(images))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(labels)], bytes(labels))
        print(name, len(images))


if __name__ == "__main__":
    main()
