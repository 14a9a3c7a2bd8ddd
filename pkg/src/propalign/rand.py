"""Seed fan-out: one global seed derives named, independent substreams."""

from __future__ import annotations

import hashlib

import numpy as np


def _tag(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Generator for the (seed, name, counters...) stream.

    Deterministic across platforms and runs; distinct names or counters give
    statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(name)] + [int(c) & 0xFFFFFFFFFFFFFFFF for c in counters]
    return np.random.default_rng(np.random.SeedSequence(entropy))
