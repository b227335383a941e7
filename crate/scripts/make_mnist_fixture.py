#!/usr/bin/env python3
"""Build the bundled 10k-digit MNIST fixture in IDX format.

Source: the `mnist` npm package (MIT, https://github.com/cazala/mnist), which
ships 10,000 MNIST digits as per-class JSON arrays of pixels normalized to
three decimals. Pixels are mapped back to bytes with round(v * 255) and the
samples are interleaved with a fixed shuffle so that class order carries no
information.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_fixture.py package/src/digits data
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[k * 784:(k + 1) * 784])
            samples.append((pixels, digit))
    random.Random(20231001).shuffle(samples)

    out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with gzip.GzipFile(out / "mnist-10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / "mnist-10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
