#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the `mnist` npm package to IDX files.

Usage: mnist_subset_to_idx.py <unpacked npm package dir> <output dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main() -> None:
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in range(10):
        raw = np.array(json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"])
        n = raw.size // 784
        images.append(raw[: n * 784].reshape(n, 784))
        labels.extend([digit] * n)
    x = np.clip(np.rint(np.vstack(images) * 255.0), 0, 255).astype(np.uint8)
    y = np.array(labels, dtype=np.uint8)
    order = np.random.default_rng(20170301).permutation(len(y))
    x, y = x[order], y[order]
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(y), 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(y)))
        f.write(y.tobytes())


if __name__ == "__main__":
    main()
