"""Named, independent random substreams derived from one root seed.

Each consumer (client-init, aux-init, server-init, shuffle, sampling, ...)
gets its own stream so that toggling one feature never shifts the random
numbers another feature sees.
"""
import zlib

import numpy as np


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *(int(k) for k in keys)))
    return np.random.Generator(np.random.PCG64(ss))
