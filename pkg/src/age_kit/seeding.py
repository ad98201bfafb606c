"""Deterministic random streams keyed by (seed, epoch, sample id)."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def sample_rng(seed, *parts):
    """Independent generator for one (seed, epoch, sample) coordinate.

    String parts are hashed with CRC32 so the stream does not depend on
    Python's per-process hash randomisation.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, parts)]))
