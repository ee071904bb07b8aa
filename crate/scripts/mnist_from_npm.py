#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: mnist_from_npm.py <path-to-unpacked-npm-package> <out-dir>

The package ships roughly 1000 MNIST digits per class as JSON arrays of
[0,1] floats. The digits are interleaved with a fixed seed and split into
6000 training and 4000 test images.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

ROWS = COLS = 28


def load(pkg: Path):
    items = []
    for label in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{label}.json").read_text())["data"]
        n = len(data) // (ROWS * COLS)
        for i in range(n):
            px = data[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            items.append((bytes(min(255, max(0, round(v * 255))) for v in px), label))
    return items


def write(out: Path, prefix: str, items):
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(items), ROWS, COLS))
        for px, _ in items:
            f.write(px)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(items)))
        f.write(bytes(label for _, label in items))


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    items = load(pkg)
    random.Random(1234).shuffle(items)
    write(out, "train", items[:6000])
    write(out, "t10k", items[6000:10000])
    print(f"{len(items)} digits -> {out}")


if __name__ == "__main__":
    main()
