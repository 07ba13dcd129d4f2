"""Convert an N-MNIST split (Train/ or Test/ directory of .bin files) to LDLF.

Each recording is binned into fixed-width time bins. Neuron ids are
`polarity * 34 * 34 + y * 34 + x`, so the file has 2312 neurons.

    python scripts/nmnist_to_ldlf.py --src N-MNIST/Test --out nmnist_test.ldlf --bin-us 3000 --steps 100
"""

import argparse
from pathlib import Path

import numpy as np

import ldlf

SIZE = 34


def read_bin(path):
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 5).astype(np.uint32)
    x, y = raw[:, 0], raw[:, 1]
    pol = raw[:, 2] >> 7
    ts = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    return x, y, pol, ts


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--src", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--bin-us", type=int, default=3000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--limit", type=int, default=None, help="samples per class")
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        files = sorted((args.src / str(digit)).glob("*.bin"))[: args.limit]
        for f in files:
            x, y, pol, ts = read_bin(f)
            t = ts // args.bin_us
            keep = t < args.steps
            ids = pol[keep] * SIZE * SIZE + y[keep] * SIZE + x[keep]
            samples.append((digit, t[keep], ids))
    ldlf.write(args.out, 2 * SIZE * SIZE, args.steps, samples)
    print(f"wrote {len(samples)} samples to {args.out}")


if __name__ == "__main__":
    main()
