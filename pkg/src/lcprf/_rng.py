"""Seed fan-out.

Every random draw in the package comes from a ``numpy.random.Generator``
backed by Philox (a 64-bit counter-based bit generator).  A run has one
integer seed; each consumer asks for a named stream and receives a
generator keyed on ``(seed, crc32(name), *extra)`` through
``numpy.random.SeedSequence``.  Changing how much one stage draws
therefore never shifts the numbers another stage sees.

Stream names used by the package: ``"data"``, ``"split"``, ``"base"``,
``"localizer"``, ``"clustering"``, ``"oracle"``.  Trees inside a forest use
the forest's seed with the tree index as the extra key.
"""

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream_seed(seed, name, *extra):
    """Derive a 64-bit child seed for a named sub-stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name), *map(int, extra)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed, *extra):
    """Philox generator for ``seed`` and optional integer sub-keys."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(e) for e in extra))
    return np.random.Generator(np.random.Philox(ss))


def stream(seed, name, *extra):
    """Philox generator for a named sub-stream of ``seed``."""
    return make_rng(seed, _name_key(name), *extra)
