"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def derive_rng(root_seed, *names):
    """Independent generator for ``(root_seed, *names)``; names may be str or int."""
    key = [int(root_seed)]
    for n in names:
        key.append(n if isinstance(n, int) else stream_key(n))
    return np.random.default_rng(np.random.SeedSequence(key))
