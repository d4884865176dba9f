"""RNG stream derivation and batch-means bookkeeping for Monte Carlo."""

import numpy as np

# Purpose tags for counter-based stream derivation.
PLACEMENT = 0
FADING = 1
PI_STATS = 2
SOLVER = 3
NESTED = 4

DEFAULT_BATCHES = 100


def stream(seed, *counters):
    """Independent generator for ``(seed, *counters)``.

    Streams are keyed by position rather than drawn sequentially, so work
    split across processes or chunks sees the same numbers.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(c) for c in counters))
    return np.random.Generator(np.random.Philox(ss))


def seed_of(rng):
    """Draw a 63-bit seed from ``rng`` for deriving child streams."""
    return int(rng.integers(0, 2**63 - 1))


def batch_sizes(samples, batches=DEFAULT_BATCHES):
    if samples < 1:
        raise ValueError("samples must be >= 1")
    nb = min(batches, samples)
    base, extra = divmod(samples, nb)
    return np.array([base + (i < extra) for i in range(nb)], dtype=int)


def batch_means(x, sizes):
    """Per-batch means along axis 0 for consecutive batches of ``sizes``."""
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    sums = np.add.reduceat(x, starts, axis=0)
    shape = (-1,) + (1,) * (x.ndim - 1)
    return sums / sizes.reshape(shape)


def mean_stderr(replicates, sizes):
    """Weighted mean and batch-means standard error of per-batch replicates."""
    w = sizes / sizes.sum()
    shape = (-1,) + (1,) * (replicates.ndim - 1)
    mean = np.sum(replicates * w.reshape(shape), axis=0)
    nb = len(sizes)
    if nb < 2:
        return mean, np.full(np.shape(mean), np.inf)
    se = np.std(replicates, axis=0, ddof=1) / np.sqrt(nb)
    return mean, se
