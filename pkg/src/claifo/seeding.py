"""Named random streams derived from a single integer seed.

Every stochastic consumer in the package asks for its own stream by name, so
adding a consumer never shifts the draws seen by another one.  The derivation
is ``SeedSequence([seed, crc32(name)])``; ports to other languages should keep
the structure (one stream per name) even if bit-level equality is not kept.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def numpy_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream_key(name)])))


def torch_stream(seed: int, name: str) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed), stream_key(name)])
    g = torch.Generator()
    g.manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
    return g


def child_seed(seed: int, name: str) -> int:
    """A plain integer seed for sub-runs (e.g. per-episode streams)."""
    ss = np.random.SeedSequence([int(seed), stream_key(name)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
