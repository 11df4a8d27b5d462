"""Deterministic seed derivation.

Every stochastic stage (init, per-epoch shuffling, augmentation) draws its
seed through derive_seed so that runs are reproducible and independent
stages never share a stream.
"""

import zlib
from contextlib import contextmanager

import numpy as np
import torch


def derive_seed(base, *tags):
    """Fold a base seed and a list of str/int tags into a fresh 32-bit seed.

    Stable across runs and platforms. Different tag tuples give
    independent streams even for the same base.
    """
    entropy = [int(base) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint32)[0])


@contextmanager
def torch_seeded(seed):
    """Run a block under a fixed torch RNG state without disturbing the caller's."""
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        yield
