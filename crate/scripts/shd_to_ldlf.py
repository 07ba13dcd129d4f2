"""Convert a Spiking Heidelberg Digits HDF5 file to LDLF (700 neurons).

    python scripts/shd_to_ldlf.py --src shd_test.h5 --out shd_test.ldlf --bin-ms 10 --steps 100
"""

import argparse
from pathlib import Path

import h5py
import numpy as np

import ldlf

CHANNELS = 700


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--src", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--bin-ms", type=float, default=10.0)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()

    samples = []
    with h5py.File(args.src, "r") as f:
        times, units, labels = f["spikes/times"], f["spikes/units"], f["labels"]
        for k in range(len(labels)):
            t = np.floor(np.asarray(times[k]) * 1000.0 / args.bin_ms).astype(np.int64)
            keep = t < args.steps
            samples.append((int(labels[k]), t[keep], np.asarray(units[k])[keep]))
    ldlf.write(args.out, CHANNELS, args.steps, samples)
    print(f"wrote {len(samples)} samples to {args.out}")


if __name__ == "__main__":
    main()
