"""Writer for the LDLF spike-event format read by `ldlif`.

See docs/FORMATS.md for the layout. Only numpy is required.
"""

import struct

import numpy as np

MAGIC = b"LDLF"
VERSION = 1
UNLABELED = 0xFFFFFFFF


def canonical(times, ids):
    """Sort events by (timestep, neuron) and drop duplicates."""
    t = np.asarray(times, dtype=np.uint64)
    i = np.asarray(ids, dtype=np.uint64)
    key = np.unique((t << np.uint64(32)) | i)
    return (key >> np.uint64(32)).astype(np.uint32), (key & np.uint64(0xFFFFFFFF)).astype(np.uint32)


def write(path, neurons, timesteps, samples):
    """`samples` is a list of (label or None, times, ids)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHIII", VERSION, 0, neurons, timesteps, len(samples)))
        for label, times, ids in samples:
            t, i = canonical(times, ids)
            if len(t) and (t.max() >= timesteps or i.max() >= neurons):
                raise ValueError("event outside the declared shape")
            f.write(struct.pack("<II", UNLABELED if label is None else label, len(t)))
            f.write(np.stack([t, i], axis=1).astype("<u4").tobytes())
