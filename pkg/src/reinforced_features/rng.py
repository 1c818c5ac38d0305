"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator, seeded through a
``SeedSequence`` built from an integer seed plus optional integer keys
(iteration, episode, pair index, ...).  PCG64 output is specified
independently of platform, so a given (seed, keys) yields the same stream
everywhere.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def weighted_draws_without_replacement(weights, n_draws: int, n_rows: int, rng: np.random.Generator):
    """Draw ``n_draws`` distinct indices per row by successive renormalisation.

    ``weights`` (n,) nonnegative; returns an (n_rows, n_draws) index array.
    Zero-weight entries are never drawn.  Weights are rescaled by their
    maximum first, so any constant weight vector behaves exactly like
    ``np.ones``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and nonnegative")
    if np.count_nonzero(w) < n_draws:
        raise ValueError("not enough positive weights for the requested draws")
    W = np.broadcast_to(w / w.max(), (n_rows, w.size)).copy()
    out = np.empty((n_rows, n_draws), dtype=np.int64)
    rows = np.arange(n_rows)
    for s in range(n_draws):
        cdf = np.cumsum(W, axis=1)
        target = rng.random(n_rows) * cdf[:, -1]
        k = np.minimum((cdf <= target[:, None]).sum(axis=1), w.size - 1)
        out[:, s] = k
        W[rows, k] = 0.0
    return out
