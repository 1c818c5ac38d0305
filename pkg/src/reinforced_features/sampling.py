"""Probabilistic keypoint selection and matching.

Keypoints are drawn independently from the heatmap distribution; matches
are drawn from a softmax over negative descriptor distances restricted to
mutual nearest neighbours.  Each sampler also reports the log-probability
of what it drew, and the ``*_grad`` helpers give the gradient of that
log-probability with respect to the quantities it was computed from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCandidates, InvalidDistribution
from .model import HeatMap


@dataclass
class KeyPointSet:
    """Unique keypoints with per-coordinate log-probabilities and draw counts.

    ``coords`` is (n, 2) integer (x, y); ``counts`` says how often each
    coordinate was drawn, so the per-draw log-probabilities are recovered
    by repeating ``logp``.
    """

    coords: np.ndarray
    logp: np.ndarray
    counts: np.ndarray
    flat_index: np.ndarray

    def __len__(self):
        return len(self.coords)

    @property
    def n_draws(self) -> int:
        return int(self.counts.sum())

    @property
    def draw_logp(self) -> np.ndarray:
        return np.repeat(self.logp, self.counts)

    @property
    def joint_logp(self) -> float:
        return float(np.dot(self.counts, self.logp))

    def count_map(self, shape) -> np.ndarray:
        """Draw counts scattered onto the pixel grid: d joint_logp / d logheat."""
        m = np.zeros(int(np.prod(shape)))
        m[self.flat_index] = self.counts
        return m.reshape(shape)


def _check_heatmap(heatmap: HeatMap):
    p = heatmap.prob
    if not (np.isfinite(p).all() and (p >= 0).all() and abs(p.sum() - 1.0) <= 1e-6):
        raise InvalidDistribution("heatmap must be nonnegative and sum to 1")
    return p


def sample_keypoints(heatmap: HeatMap, n: int, rng: np.random.Generator) -> KeyPointSet:
    """``n`` independent draws from the heatmap, duplicates collapsed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = _check_heatmap(heatmap).ravel()
    cdf = np.cumsum(p)
    u = rng.random(n) * cdf[-1]
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), p.size - 1)
    uniq, counts = np.unique(flat, return_counts=True)
    W = heatmap.shape[1]
    coords = np.stack([uniq % W, uniq // W], axis=1)
    return KeyPointSet(coords, heatmap.logp.ravel()[uniq], counts, uniq)


def keypoint_set_from_coords(heatmap: HeatMap, coords) -> KeyPointSet:
    """Wrap deterministic coordinates (one draw each) as a ``KeyPointSet``."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    W = heatmap.shape[1]
    flat = c[:, 1] * W + c[:, 0]
    return KeyPointSet(c, heatmap.logp.ravel()[flat], np.ones(len(c), dtype=np.int64), flat)


def descriptor_distances(desc1, desc2) -> np.ndarray:
    """All pairwise L2 distances between rows of two descriptor arrays."""
    a = np.asarray(desc1, dtype=np.float64)
    b = np.asarray(desc2, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def mutual_nn_candidates(desc1, desc2, k: int = 1) -> np.ndarray:
    """Index pairs (i, j) that are mutual k-nearest neighbours.

    With ``k == 1`` this is plain mutual nearest neighbour matching; ties go
    to the lower index.  Returns an (m, 2) array sorted by ``i``.
    """
    desc1 = np.asarray(desc1)
    desc2 = np.asarray(desc2)
    if len(desc1) == 0 or len(desc2) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = descriptor_distances(desc1, desc2)
    if k == 1:
        nn12 = np.argmin(d, axis=1)
        nn21 = np.argmin(d, axis=0)
        i = np.flatnonzero(nn21[nn12] == np.arange(len(d)))
        return np.stack([i, nn12[i]], axis=1).astype(np.int64)
    k1 = min(k, d.shape[1])
    k2 = min(k, d.shape[0])
    # stable argsort keeps the lower index first among equal distances
    near12 = np.zeros(d.shape, dtype=bool)
    near21 = np.zeros(d.shape, dtype=bool)
    rows = np.argsort(d, axis=1, kind="stable")[:, :k1]
    cols = np.argsort(d, axis=0, kind="stable")[:k2, :]
    np.put_along_axis(near12, rows, True, axis=1)
    np.put_along_axis(near21, cols, True, axis=0)
    return np.argwhere(near12 & near21).astype(np.int64)


@dataclass
class MatchSet:
    """Candidate matches with their distances and log-probabilities.

    For a subsampled set, ``logp`` still holds the full-distribution
    log-probabilities of the drawn matches, in draw order, and
    ``sequence_logp`` the log-probability of the whole draw sequence.
    """

    pairs: np.ndarray
    dist: np.ndarray
    logp: np.ndarray
    is_subsampled: bool = False
    sequence_logp: float = 0.0
    order: np.ndarray | None = None

    def __len__(self):
        return len(self.pairs)

    @property
    def prob(self) -> np.ndarray:
        return np.exp(self.logp)


def _log_softmax(v):
    m = v.max()
    return v - (m + math.log(np.exp(v - m).sum()))


def match_distribution(candidates, desc1, desc2) -> MatchSet:
    """Softmax over negative descriptor distances of the candidate pairs."""
    pairs = np.asarray(candidates, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyCandidates("no candidate matches")
    diff = np.asarray(desc1)[pairs[:, 0]] - np.asarray(desc2)[pairs[:, 1]]
    dist = np.sqrt((diff * diff).sum(axis=1))
    return MatchSet(pairs, dist, _log_softmax(-dist))


def sample_match_subset(ms: MatchSet, fraction: float, rng: np.random.Generator) -> MatchSet:
    """Draw ceil(fraction * |ms|) matches without replacement.

    Each draw renormalises the distribution over the matches still
    available; the product of those conditional probabilities is the
    probability of the realised sequence.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if len(ms) == 0:
        raise EmptyCandidates("no candidate matches")
    m = math.ceil(fraction * len(ms))
    w = np.exp(ms.logp - ms.logp.max())
    order = np.empty(m, dtype=np.int64)
    seq = 0.0
    for s in range(m):
        cdf = np.cumsum(w)
        k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(w) - 1)
        seq += math.log(w[k] / cdf[-1])
        order[s] = k
        w[k] = 0.0
    return MatchSet(ms.pairs[order], ms.dist[order], ms.logp[order], True, seq, order)


def subset_logp(ms: MatchSet, order) -> float:
    """Log-probability of drawing ``order`` (indices into ``ms``) in sequence."""
    v = -ms.dist
    avail = np.ones(len(ms), dtype=bool)
    total = 0.0
    for k in order:
        total += v[k] - _logsumexp(v[avail])
        avail[k] = False
    return total


def subset_logp_grad_dist(ms: MatchSet, order) -> np.ndarray:
    """Gradient of ``subset_logp`` w.r.t. the candidate distances."""
    v = -ms.dist
    avail = np.ones(len(ms), dtype=bool)
    g = np.zeros(len(ms))
    for k in order:
        p = np.zeros(len(ms))
        p[avail] = np.exp(v[avail] - _logsumexp(v[avail]))
        # each term is -dist_k - lse(-dist_avail)
        g += p
        g[k] -= 1.0
        avail[k] = False
    return g


def _logsumexp(v):
    m = v.max()
    return m + math.log(np.exp(v - m).sum())


def dist_grad_to_descriptors(pairs, desc1, desc2, g_dist):
    """Chain distance gradients onto the two descriptor arrays."""
    desc1 = np.asarray(desc1)
    desc2 = np.asarray(desc2)
    diff = desc1[pairs[:, 0]] - desc2[pairs[:, 1]]
    dist = np.sqrt((diff * diff).sum(axis=1))
    unit = diff / np.maximum(dist, 1e-300)[:, None]
    g1 = np.zeros_like(desc1)
    g2 = np.zeros_like(desc2)
    np.add.at(g1, pairs[:, 0], g_dist[:, None] * unit)
    np.add.at(g2, pairs[:, 1], -g_dist[:, None] * unit)
    return g1, g2


def extract_keypoints_test(heatmap, max_n: int, nms_radius: int, min_value: float) -> np.ndarray:
    """Deterministic keypoints: local maxima above ``min_value``, strongest first.

    A pixel survives if it beats every neighbour within the square window
    of radius ``nms_radius``; against an equal neighbour it survives only if
    it comes first in row-major order.  Returns (n, 2) integer (x, y).
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    v = heatmap.prob if isinstance(heatmap, HeatMap) else np.asarray(heatmap, dtype=np.float64)
    H, W = v.shape
    r = int(nms_radius)
    padded = np.full((H + 2 * r, W + 2 * r), -np.inf)
    padded[r : r + H, r : r + W] = v
    keep = v >= min_value
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy : r + dy + H, r + dx : r + dx + W]
            later = dy > 0 or (dy == 0 and dx > 0)
            keep &= (v >= nb) if later else (v > nb)
    ys, xs = np.nonzero(keep)
    vals = v[ys, xs]
    order = np.argsort(-vals, kind="stable")[:max_n]
    return np.stack([xs[order], ys[order]], axis=1).astype(np.int64)
