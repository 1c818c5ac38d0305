"""Exact expected loss of the toy pipeline by enumerating every outcome.

Written independently of the sampling code: it walks all keypoint draw
sequences and all ordered match subsets and weights each outcome by its
probability.
"""

import itertools
import math

import numpy as np


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def expected_loss(inst, n_draws, fraction):
    H, W = inst.shape
    npx = H * W
    probs = [_softmax(inst.logits[k].ravel()) for k in range(2)]
    desc = [inst.grids[k].reshape(npx, -1) for k in range(2)]
    desc = [d / np.linalg.norm(d, axis=1, keepdims=True) for d in desc]
    total = 0.0
    for s1 in itertools.product(range(npx), repeat=n_draws):
        p1 = np.prod(probs[0][list(s1)])
        u1 = sorted(set(s1))
        for s2 in itertools.product(range(npx), repeat=n_draws):
            p2 = np.prod(probs[1][list(s2)])
            u2 = sorted(set(s2))
            total += p1 * p2 * _expected_match_loss(inst, u1, u2, desc, fraction, W)
    return total


def _expected_match_loss(inst, u1, u2, desc, fraction, W):
    a = desc[0][u1]
    b = desc[1][u2]
    dist = np.linalg.norm(a[:, None] - b[None], axis=2)
    cand = [(i, j) for i in range(len(u1)) for j in range(len(u2))
            if np.argmin(dist[i]) == j and np.argmin(dist[:, j]) == i]
    if not cand:
        return inst.task(None, None, np.zeros((0, 2), dtype=int))[0]
    w = np.exp(-np.array([dist[i, j] for i, j in cand]))
    m = math.ceil(fraction * len(cand))
    kp1 = np.array([(p % W, p // W) for p in u1])
    kp2 = np.array([(p % W, p // W) for p in u2])
    out = 0.0
    for order in itertools.permutations(range(len(cand)), m):
        p, avail = 1.0, np.ones(len(cand), dtype=bool)
        for k in order:
            p *= w[k] / w[avail].sum()
            avail[k] = False
        pairs = np.array([cand[k] for k in order])
        out += p * inst.task(kp1, kp2, pairs)[0]
    return out


def exact_gradient(inst, n_draws, fraction, eps=1e-6):
    """Central differences of the enumerated expectation."""
    v = inst.flat()
    g = np.zeros_like(v)
    for k in range(len(v)):
        up, dn = v.copy(), v.copy()
        up[k] += eps
        dn[k] -= eps
        g[k] = (expected_loss(inst.with_flat(up), n_draws, fraction) - expected_loss(inst.with_flat(dn), n_draws, fraction)) / (2 * eps)
    return g
