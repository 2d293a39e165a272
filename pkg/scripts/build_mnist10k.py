"""Rebuild data/mnist10k from the `mnist` npm package.

That package ships the 10,000 MNIST test digits as JSON arrays of pixel
intensities rounded to three decimals; ``round(v * 255)`` recovers the
original bytes exactly.  The digits are shuffled with a fixed seed and split
8,000 / 2,000 into IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist10k.py package/src/digits data/mnist10k
"""

import argparse
import json
from pathlib import Path

import numpy as np

from padnet.data import write_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        pix = np.rint(flat * 255.0)
        assert np.abs(flat * 255.0 - pix).max() < 0.5
        images.append(pix.astype(np.uint8).reshape(-1, 28, 28))
        labels.append(np.full(len(images[-1]), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    cut = len(labels) - args.test

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[:cut])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[:cut])
    write_idx(args.out_dir / "test-images-idx3-ubyte.gz", images[cut:])
    write_idx(args.out_dir / "test-labels-idx1-ubyte.gz", labels[cut:])
    print(f"wrote {cut} train / {len(labels) - cut} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
