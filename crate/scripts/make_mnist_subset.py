"""Build the bundled MNIST subset (IDX format) from the npm `mnist` package.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import json
import random
import struct
import sys
from pathlib import Path

PER_CLASS = 500


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(flat) // 784
        for i in range(min(count, PER_CLASS)):
            pixels = flat[i * 784:(i + 1) * 784]
            samples.append((digit, bytes(round(v * 255) for v in pixels)))
    random.Random(0).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    with open(dst / "images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for _, px in samples:
            f.write(px)
    with open(dst / "labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for label, _ in samples))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
