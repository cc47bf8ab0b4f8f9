#!/usr/bin/env python3
"""Convert the 10k-digit MNIST sample shipped in the `mnist` npm package into IDX files.

Usage: npm pack mnist && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Every fifth sample of each digit goes to the test split. Samples are interleaved
across classes. Pixels are stored as round(v * 255).
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIZE = 28 * 28


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    per_class = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // SIZE
        per_class.append([raw[i * SIZE:(i + 1) * SIZE] for i in range(n)])
    splits = {"train": [], "t10k": []}
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                split = "t10k" if i % 5 == 4 else "train"
                splits[split].append((digit, samples[i]))
    for name, items in splits.items():
        pixels = bytes(
            min(255, max(0, round(float(v) * 255))) for _, img in items for v in img
        )
        labels = bytes(d for d, _ in items)
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(items), 28, 28], pixels)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(items)], labels)
        print(name, len(items))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
