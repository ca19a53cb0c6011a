"""Single-root seed derivation.

Every random stream in a run is seeded by ``derive_seed(root, label)``: the
root seed and the CRC-32 of a short label (``"data"``, ``"teacher"``,
``"stream/kws"``, ...) feed :class:`numpy.random.SeedSequence`, whose first
32-bit word becomes the stream seed.
"""
import zlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1)[0])
