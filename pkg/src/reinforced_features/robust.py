"""RANSAC essential-matrix fitting and the clamped pose loss.

This is the black box of the training pipeline: it turns a match subset
into a scalar loss and never needs to be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllHypothesesDegenerate, NotEnoughMatches, PipelineError
from .fivepoint import solve_batch
from .geometry import Camera, Pose, angular_pose_error, decompose_essential, epipolar_distances_batch
from .rng import make_rng, weighted_draws_without_replacement

SOFT_CLAMP_START = 25.0
HARD_CLAMP_START = 75.0
LOSS_CEILING = SOFT_CLAMP_START + math.sqrt(HARD_CLAMP_START - SOFT_CLAMP_START)

_FIRST_CHUNK = 16
_MAX_CHUNK = 256


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 1e-3
    max_iterations: int = 1000
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class RansacResult:
    E: np.ndarray
    inlier_mask: np.ndarray
    iterations: int


@dataclass
class TaskResult:
    est_pose: Pose | None
    inlier_mask: np.ndarray
    raw_error: float
    clamped_loss: float
    iterations_run: int
    failed: bool
    error: str = field(default="", repr=False)


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = 5) -> float:
    """Standard RANSAC stopping bound for the current best inlier ratio."""
    if inlier_ratio >= 1.0:
        return 0.0
    p_good = inlier_ratio**sample_size
    if p_good <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log1p(-p_good))


def ransac_essential(x1, x2, cfg: RansacConfig, guidance=None, rng: np.random.Generator | None = None):
    """Maximum-inlier essential matrix over 5-point minimal samples.

    ``x1``, ``x2`` are (n, 2) calibrated coordinates.  With ``guidance``,
    minimal samples are drawn from the normalised weights instead of
    uniformly.  Hypotheses are visited in sample order and the first one
    reaching a given inlier count wins ties.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 5:
        raise NotEnoughMatches(f"need at least 5 matches, got {n}")
    weights = np.ones(n) if guidance is None else np.asarray(guidance, dtype=np.float64)
    if weights.shape != (n,) or (weights < 0).any() or not weights.sum() > 0:
        raise ValueError("guidance weights must be nonnegative with positive sum, one per match")
    rng = make_rng(cfg.seed) if rng is None else rng

    best_E, best_count, best_mask = None, -1, None
    required = cfg.max_iterations
    it = 0
    chunk = _FIRST_CHUNK
    while it < required:
        b = min(chunk, required - it)
        chunk = min(2 * chunk, _MAX_CHUNK)
        idx = weighted_draws_without_replacement(weights, 5, b, rng)
        Es, owner, _ = solve_batch(x1[idx], x2[idx])
        if len(Es):
            dist = epipolar_distances_batch(Es, x1, x2)
            masks = dist < cfg.inlier_threshold
            counts = masks.sum(axis=1)
        else:
            counts = np.zeros(0, dtype=int)
        sol = 0
        for k in range(b):
            it += 1
            while sol < len(owner) and owner[sol] == k:
                if counts[sol] > best_count:
                    best_E, best_count, best_mask = Es[sol], int(counts[sol]), masks[sol]
                    required = min(cfg.max_iterations, required_iterations(best_count / n, cfg.confidence))
                sol += 1
            if it >= required:
                break
    if best_E is None:
        raise AllHypothesesDegenerate("every minimal sample failed the 5-point solver")
    return RansacResult(best_E, best_mask, it)


def soft_clamp(error_deg: float) -> float:
    """Identity up to 25 deg, square-root growth to 75 deg, constant beyond."""
    e = float(error_deg)
    if e < 0 or math.isnan(e):
        raise ValueError("error must be a nonnegative number")
    if e <= SOFT_CLAMP_START:
        return e
    if e <= HARD_CLAMP_START:
        return SOFT_CLAMP_START + math.sqrt(e - SOFT_CLAMP_START)
    return LOSS_CEILING


def run_task(
    kp1,
    kp2,
    matches,
    gt: Pose,
    cfg: RansacConfig,
    camera: Camera,
    rng: np.random.Generator | None = None,
    guidance=None,
) -> TaskResult:
    """Pose loss of a match subset; every failure maps to the loss ceiling.

    ``kp1``, ``kp2`` are pixel coordinates, ``matches`` an (m, 2) array of
    index pairs into them.
    """
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    empty = np.zeros(len(matches), dtype=bool)
    try:
        if len(matches) < 5:
            raise NotEnoughMatches(f"need at least 5 matches, got {len(matches)}")
        x1 = camera.normalize(np.asarray(kp1, dtype=np.float64)[matches[:, 0]])
        x2 = camera.normalize(np.asarray(kp2, dtype=np.float64)[matches[:, 1]])
        res = ransac_essential(x1, x2, cfg, guidance=guidance, rng=rng)
        est = decompose_essential(res.E, x1[res.inlier_mask], x2[res.inlier_mask])
    except PipelineError as exc:
        return TaskResult(None, empty, math.inf, LOSS_CEILING, 0, True, error=type(exc).__name__)
    raw = angular_pose_error(est, gt)
    return TaskResult(est, res.inlier_mask, raw, soft_clamp(raw), res.iterations, False)
