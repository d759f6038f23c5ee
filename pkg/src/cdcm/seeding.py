"""Named random streams derived from one top-level seed.

Every stochastic component (weight init, shuffling, augmentation, sampling)
draws from its own stream so one can be re-seeded without perturbing the
others.
"""

import zlib

import numpy as np
import torch

STREAMS = ("init", "shuffle", "augment", "sampling")


def stream_seed(seed, name):
    """Deterministic 32-bit seed for stream ``name`` under top-level ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng(seed, name):
    return np.random.default_rng(stream_seed(seed, name))


def torch_generator(seed, name):
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, name))
    return g
