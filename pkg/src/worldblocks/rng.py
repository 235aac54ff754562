"""Named random streams.

All randomness in the library flows through `stream(seed, name)`: a stream
is identified by a root seed plus a string name (convention
"module:purpose"), so adding a new consumer never perturbs the draws seen
by existing ones.  Streams are plain numpy Generators (PCG64) and are
stable across runs and platforms.
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the named random stream for a root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def sample_categorical(rng: np.random.Generator, probs) -> int:
    """Draw one index from a probability vector via inverse CDF.

    Uses a single uniform draw so that callers (and test oracles) can
    reproduce the stream consumption exactly.
    """
    p = np.asarray(probs, dtype=float)
    u = rng.random()
    return int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right").clip(0, len(p) - 1))
