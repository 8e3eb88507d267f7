"""Deterministic RNG substreams keyed by string labels.

Per-instance and per-round streams derive from (seed, labels...) so results
do not depend on scheduling or worker count.
"""

import hashlib

import numpy as np


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(str(text).encode()).digest()[:8], "little")


def rng_stream(seed: int, *labels) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_hash(l) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
