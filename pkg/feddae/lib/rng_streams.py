"""
Named random substreams derived from one root seed.

derive_rng(seed, "client", round, user) always yields the same generator,
independent of how many other streams were drawn before, so sequential and
parallel client execution agree and ablations share identical splits.
"""

import hashlib

import numpy as np

# Stream names used across the package
SPLIT = "split"
NEGATIVES = "negatives"
INIT = "init"
CLIENT = "client"
NOISE = "noise"
SAMPLING = "sampling"
SHUFFLE = "shuffle"


def _part_key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"Stream index must be nonnegative, got {part}")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *parts: str | int) -> np.random.Generator:
    """Generator for the substream identified by (seed, *parts)."""
    entropy = [int(seed), *(_part_key(p) for p in parts)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
